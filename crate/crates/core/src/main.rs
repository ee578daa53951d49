use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use musicdiff::config::Config;
use musicdiff::fragmentation::Strategy;
use musicdiff::notation::Notation;
use musicdiff::pipeline::{self, EvalInputs, GenerateOverrides, Manifest};
use musicdiff::{synth, Error, Result};

#[derive(Parser)]
#[command(name = "musicdiff", version, about = "Symbolic-music joint diffusion toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    notation: Option<NotationArg>,
    #[arg(long, global = true)]
    strategy: Option<StrategyArg>,
    #[arg(long, global = true)]
    variance_preserving: bool,
    /// Refresh chord and section latents every K reverse steps (0 = never).
    #[arg(long = "refrag-every", value_name = "K", global = true)]
    refrag_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NotationArg {
    Remi,
    Cp,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    L2r,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    /// Eight-bar phrases with repeated halves.
    Toy,
    /// Pieces of sections with distinct pitch and rhythm statistics.
    Sections,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of MIDI files with section sidecars.
    Synth {
        #[arg(long, value_enum, default_value = "toy")]
        kind: CorpusKind,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Index a directory of MIDI files into a manifest.
    Ingest {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fragmentation model on annotated pieces.
    TrainFrag {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate every piece of a manifest with sections.
    Fragment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the joint note, chord and section encoders.
    JspPretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser; writes the checkpoint and a per-epoch CSV log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Derive a prompt file from a MIDI file and its sections sidecar.
    Prompt {
        smf: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a piece for a prompt file; writes an SMF and a JSON sidecar.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_activations: bool,
    },
    /// Compute the metric report for a manifest or a set of MIDI files.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output prefix for `.csv` and `.json`.
        #[arg(long)]
        out: PathBuf,
        files: Vec<PathBuf>,
    },
    /// Self-similarity matrix and fitness scape of one MIDI file.
    Plot {
        smf: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl GlobalArgs {
    fn config(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.notation {
            c.fragment.notation = match n {
                NotationArg::Remi => Notation::Remi,
                NotationArg::Cp => Notation::Cp,
            };
        }
        if let Some(s) = self.strategy {
            c.fragment.strategy = match s {
                StrategyArg::L2r => Strategy::L2r,
                StrategyArg::Global => Strategy::Global,
            };
        }
        if self.variance_preserving {
            c.schedule.variance_preserving = true;
        }
        if let Some(k) = self.refrag_every {
            c.generate.refrag_every = k;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    pipeline::init_threads()?;
    let g = &cli.global;
    match &cli.command {
        Command::Synth { kind, count, out } => {
            let seed = g.config()?.seed;
            let (pieces, stem) = match kind {
                CorpusKind::Toy => (synth::toy_phrases(*count), "phrase"),
                CorpusKind::Sections => (synth::section_corpus(*count, seed), "piece"),
            };
            let files = pipeline::write_corpus(&pieces, out, stem)?;
            println!("wrote {} pieces to {}", files.len(), out.display());
        }
        Command::Ingest { dir, out } => {
            let m = pipeline::cmd_ingest(dir, out)?;
            println!("indexed {} files into {}", m.entries.len(), out.display());
        }
        Command::TrainFrag { manifest, ckpt, out } => {
            let trace = pipeline::cmd_train_frag(&Manifest::load(manifest)?, &g.config()?, ckpt.as_deref(), out)?;
            println!("fragmentation loss {:.5} -> {:.5}", trace.first().unwrap_or(&f64::NAN), trace.last().unwrap_or(&f64::NAN));
        }
        Command::Fragment { manifest, ckpt, out } => {
            let found = pipeline::cmd_fragment(&Manifest::load(manifest)?, ckpt, g.config()?.fragment.notation, out)?;
            println!("annotated {} pieces into {}", found.len(), out.display());
        }
        Command::JspPretrain { manifest, ckpt, out } => {
            let trace = pipeline::cmd_jsp_pretrain(&Manifest::load(manifest)?, &g.config()?, ckpt.as_deref(), out)?;
            println!("contrastive loss {:.5} -> {:.5}", trace.first().unwrap_or(&f64::NAN), trace.last().unwrap_or(&f64::NAN));
        }
        Command::Train { manifest, ckpt, out, log } => {
            let log = log.clone().unwrap_or_else(|| pipeline::sibling(out, ".log.csv"));
            let s = pipeline::cmd_train(&Manifest::load(manifest)?, &g.config()?, ckpt, out, &log)?;
            let last = s.probe.last().map_or(f64::NAN, |p| p.1);
            println!("probe loss {:.5} -> {:.5} over {} epochs; log {}", s.initial_probe(), last, s.epochs.len(), log.display());
        }
        Command::Prompt { smf, out } => {
            let p = pipeline::cmd_prompt(smf, out)?;
            println!("prompt of {} bars, {} sections into {}", p.bars(), p.sections.len(), out.display());
        }
        Command::Generate { ckpt, prompt, out, dump_activations } => {
            let seed = g.seed.unwrap_or(Config::default().seed);
            let overrides = GenerateOverrides { refrag_every: g.refrag_every, variance_preserving: g.variance_preserving };
            let s = pipeline::cmd_generate(ckpt, &pipeline::load_prompt(prompt)?, seed, &overrides, out, *dump_activations)?;
            println!("generated {} steps into {}", s.steps, out.display());
        }
        Command::Evaluate { manifest, ckpt, out, files } => {
            let seed = g.config()?.seed;
            let report = match manifest {
                Some(m) => {
                    let m = Manifest::load(m)?;
                    pipeline::cmd_evaluate(&EvalInputs::Manifest(&m, None), ckpt.as_deref(), seed, out)?
                }
                None => pipeline::cmd_evaluate(&EvalInputs::Files(files), ckpt.as_deref(), seed, out)?,
            };
            println!("evaluated {} pieces into {}.{{csv,json}}", report.pieces.len(), out.display());
        }
        Command::Plot { smf, out } => {
            let written = pipeline::cmd_plot(smf, out)?;
            println!("wrote {}", written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" "));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput(_) => 2,
        Error::ConfigInvalid(_) => 3,
        Error::ChecksumMismatch(_) => 4,
        _ => 1,
    }
}

fn fail(e: &Error) -> ExitCode {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    eprintln!("error code={} message={msg:?}", e.code());
    ExitCode::from(exit_code(e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return fail(&Error::ConfigInvalid(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
