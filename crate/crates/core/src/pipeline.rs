//! File-level commands behind the `musicdiff` binary: dataset manifests,
//! model training, generation, evaluation and plots. Every command is a
//! deterministic function of its input files, configuration and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Segments, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::denoiser::{DenoiseInput, Denoiser};
use crate::diffusion::{generate, perturb_with, standard_normal, Prompt};
use crate::embedding::{jsp_pretrain, FrozenTables, SemanticEncoders};
use crate::error::{Error, Result};
use crate::fragmentation::{fragment, train_fragmenter, FragModel, FragPiece, SectionAnnotation};
use crate::metrics::{
    compute_fitness_scape, compute_ppl, compute_ssm, write_matrix_csv, write_pgm, MetricReport, PieceMetrics, PitchModel,
};
use crate::midi::{dequantize, parse_midi, quantize, write_midi, QuantizedScore};
use crate::notation::{align_triplets, recognize_chords, EventBar, EventStream, Notation, MAX_POSITIONS};
use crate::synth::AnnotatedPiece;
use crate::train::{batch_regression, probe_batch, train_epochs, write_epoch_log, DiffusionPiece, EpochRecord, Trainer};

const FRAG_MODULE: &str = "frag";
const JSP_MODULE: &str = "jsp";
const DENOISER_MODULE: &str = "den";
const SECTIONS_SUFFIX: &str = ".sections.json";
const PROBE_PIECES: usize = 16;

fn missing(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::MissingInput(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| missing(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// Every tenth file goes to validation and the one after it to test.
    fn for_index(i: usize) -> Self {
        match i % 10 {
            8 => Split::Valid,
            9 => Split::Test,
            _ => Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sections: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    /// Load and check every entry's hash against the file on disk.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest =
            serde_json::from_slice(&read(path)?).map_err(|e| Error::ConfigInvalid(format!("manifest {}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &m.entries {
            let file = m.resolve(&e.path);
            if sha256_hex(&read(&file)?) != e.hash {
                return Err(Error::ChecksumMismatch(file.display().to_string()));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, serde_json::to_string_pretty(self)?)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| split.is_none_or(|s| e.split == s))
    }
}

/// Index every `.mid`/`.midi` file under `dir`, in path order, with a
/// `<file>.sections.json` sidecar recorded when present.
pub fn cmd_ingest(dir: &Path, manifest_out: &Path) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(missing(dir, "not a directory"));
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("mid") || x.eq_ignore_ascii_case("midi")))
        .collect();
    files.sort();
    let root = manifest_out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let root = fs::canonicalize(root).unwrap_or_else(|_| root.to_path_buf());
    let rel = |p: &Path| -> String {
        let abs = fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        abs.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(abs).to_string_lossy().into_owned()
    };
    let mut entries = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let bytes = read(f)?;
        parse_midi(&bytes)?;
        let side = sibling(f, SECTIONS_SUFFIX);
        entries.push(ManifestEntry {
            path: rel(f),
            split: Split::for_index(i),
            hash: sha256_hex(&bytes),
            sections: side.is_file().then(|| rel(&side)),
        });
    }
    let m = Manifest { entries, root };
    m.save(manifest_out)?;
    Ok(m)
}

/// One decoded corpus file.
#[derive(Debug, Clone)]
pub struct CorpusPiece {
    pub name: String,
    pub score: QuantizedScore,
    pub bars: Vec<EventBar>,
    pub sections: Option<Vec<SectionAnnotation>>,
}

impl CorpusPiece {
    pub fn from_score(name: String, score: QuantizedScore, notation: Notation) -> Result<Self> {
        let chords = recognize_chords(&score);
        let bars = EventStream::encode(notation, &score, &chords)?.bars()?;
        Ok(CorpusPiece { name, score, bars, sections: None })
    }

    fn total_steps(&self) -> u32 {
        self.bars.len() as u32 * MAX_POSITIONS
    }

    /// Sidecar sections, else those found by `fragmenter`, else one section
    /// over the whole piece.
    pub fn sections_or(&self, fragmenter: Option<&FragModel>) -> Result<Vec<SectionAnnotation>> {
        if let Some(s) = &self.sections {
            return Ok(s.clone());
        }
        if let Some(m) = fragmenter {
            let found = fragment(m, &self.score)?;
            if !found.is_empty() {
                return Ok(found);
            }
        }
        Ok(vec![SectionAnnotation { start: 0, end: self.total_steps().max(1), label: 0 }])
    }
}

pub fn load_corpus(manifest: &Manifest, split: Option<Split>, notation: Notation) -> Result<Vec<CorpusPiece>> {
    let pieces: Vec<CorpusPiece> = manifest
        .split(split)
        .map(|e| {
            let score = quantize(&parse_midi(&read(&manifest.resolve(&e.path))?)?);
            let mut p = CorpusPiece::from_score(e.path.clone(), score, notation)?;
            if let Some(side) = &e.sections {
                let file = manifest.resolve(side);
                let s: Vec<SectionAnnotation> =
                    serde_json::from_slice(&read(&file)?).map_err(|err| Error::ConfigInvalid(format!("{}: {err}", file.display())))?;
                p.sections = Some(s);
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    if pieces.is_empty() {
        return Err(Error::MissingInput("manifest has no pieces for this split".into()));
    }
    Ok(pieces)
}

/// Deployed models with the configuration they were built under.
#[derive(Debug, Clone)]
pub struct Models {
    pub config: Config,
    pub frag: Option<FragModel>,
    pub jsp: Option<SemanticEncoders>,
    pub den: Option<Denoiser>,
}

impl Models {
    pub fn new(config: Config) -> Self {
        Models { config, frag: None, jsp: None, den: None }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck.meta.get("config").and_then(|v| v.as_str()).ok_or_else(|| Error::InvalidCheckpoint("header has no config".into()))?;
        let config = Config::from_toml(text)?;
        let frag = ck.has_module(FRAG_MODULE).then(|| FragModel::from_store(config.frag_config(), ck.store(FRAG_MODULE)?)).transpose()?;
        let jsp =
            ck.has_module(JSP_MODULE).then(|| SemanticEncoders::from_store(config.jsp_config(), ck.store(JSP_MODULE)?)).transpose()?;
        let den = ck
            .has_module(DENOISER_MODULE)
            .then(|| Denoiser::from_store(config.denoiser(), config.noise_schedule()?, ck.store(DENOISER_MODULE)?))
            .transpose()?;
        Ok(Models { config, frag, jsp, den })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({ "format": "musicdiff", "config": self.config.to_toml() }));
        if let Some(m) = &self.frag {
            ck.add_store(FRAG_MODULE, &m.store);
        }
        if let Some(m) = &self.jsp {
            ck.add_store(JSP_MODULE, &m.store);
        }
        if let Some(m) = &self.den {
            ck.add_store(DENOISER_MODULE, &m.store);
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint().to_bytes()?;
        write(path, bytes)
    }

    fn loaded<'a, T>(m: &'a Option<T>, what: &str) -> Result<&'a T> {
        m.as_ref().ok_or_else(|| Error::ModelMissing(format!("checkpoint has no {what}")))
    }

    pub fn jsp(&self) -> Result<&SemanticEncoders> {
        Self::loaded(&self.jsp, "semantic encoders; run jsp-pretrain first")
    }

    pub fn den(&self) -> Result<&Denoiser> {
        Self::loaded(&self.den, "denoiser; run train first")
    }

    pub fn frag(&self) -> Result<&FragModel> {
        Self::loaded(&self.frag, "fragmentation model; run train-frag first")
    }
}

/// Load `ckpt` if given, with `config` replacing the stored configuration.
fn base_models(ckpt: Option<&Path>, config: &Config) -> Result<Models> {
    let mut m = match ckpt {
        Some(p) => Models::load(p)?,
        None => Models::new(config.clone()),
    };
    m.config = config.clone();
    Ok(m)
}

/// Train the fragmentation model on pieces that carry section sidecars.
pub fn cmd_train_frag(manifest: &Manifest, config: &Config, ckpt: Option<&Path>, out: &Path) -> Result<Vec<f64>> {
    let corpus: Vec<FragPiece> = load_corpus(manifest, Some(Split::Train), config.fragment.notation)?
        .into_iter()
        .filter_map(|p| p.sections.map(|s| FragPiece::new(p.bars, s)))
        .collect::<Result<_>>()?;
    if corpus.is_empty() {
        return Err(Error::MissingInput("no training piece has a sections sidecar".into()));
    }
    let (model, trace) = train_fragmenter(&corpus, config.frag_config())?;
    let mut models = base_models(ckpt, config)?;
    models.frag = Some(model);
    models.save(out)?;
    Ok(trace)
}

/// Section annotations, keyed by manifest path, for every piece.
pub fn cmd_fragment(manifest: &Manifest, ckpt: &Path, notation: Notation, out: &Path) -> Result<BTreeMap<String, Vec<SectionAnnotation>>> {
    let models = Models::load(ckpt)?;
    let model = models.frag()?;
    let found: BTreeMap<String, Vec<SectionAnnotation>> = load_corpus(manifest, None, notation)?
        .into_iter()
        .map(|p| Ok((p.name.clone(), fragment(model, &p.score)?)))
        .collect::<Result<_>>()?;
    write(out, serde_json::to_string_pretty(&found)?)?;
    Ok(found)
}

/// Each training piece with the sections used to condition it.
fn annotated(models: &Models, pieces: &[CorpusPiece]) -> Result<Vec<(Vec<EventBar>, Vec<SectionAnnotation>)>> {
    pieces.iter().map(|p| Ok((p.bars.clone(), p.sections_or(models.frag.as_ref())?))).collect()
}

pub fn cmd_jsp_pretrain(manifest: &Manifest, config: &Config, ckpt: Option<&Path>, out: &Path) -> Result<Vec<f64>> {
    let mut models = base_models(ckpt, config)?;
    let pieces = load_corpus(manifest, Some(Split::Train), config.fragment.notation)?;
    let corpus = annotated(&models, &pieces)?
        .iter()
        .map(|(bars, sections)| align_triplets(bars, MAX_POSITIONS, sections))
        .collect::<Result<Vec<_>>>()?;
    let (enc, trace) = jsp_pretrain(&corpus, config.jsp_config())?;
    models.jsp = Some(enc);
    models.den = None;
    models.save(out)?;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    /// Regression loss on a fixed probe batch, as (step, loss), taken before
    /// training and after every epoch.
    pub probe: Vec<(usize, f64)>,
}

impl TrainSummary {
    pub fn initial_probe(&self) -> f64 {
        self.probe.first().map_or(f64::NAN, |p| p.1)
    }

    /// Smallest probe loss recorded within the first `steps` steps.
    pub fn best_probe_within(&self, steps: usize) -> f64 {
        self.probe.iter().filter(|p| p.0 <= steps).map(|p| p.1).fold(f64::INFINITY, f64::min)
    }
}

/// Train the diffusion denoiser over pre-trained semantic encoders from
/// `models`, returning the trained models and the training trace.
pub fn train_models(mut models: Models, pieces: &[(Vec<EventBar>, Vec<SectionAnnotation>)]) -> Result<(Models, TrainSummary)> {
    let config = models.config.clone();
    let frozen = models.jsp()?.frozen();
    let corpus: Vec<DiffusionPiece> = pieces.iter().map(|(b, s)| DiffusionPiece::from_bars(b, s)).collect::<Result<_>>()?;
    let model = Denoiser::new(config.denoiser(), config.noise_schedule()?);
    let probe = probe_batch(&model, &frozen, &corpus, PROBE_PIECES, config.seed)?;
    let mut trace = vec![(0, batch_regression(&model, &frozen, &probe)?)];
    let mut trainer = Trainer::new(model, frozen, config.train_config());
    let epoch_steps = config.train.epoch_steps;
    let epochs = train_epochs(&mut trainer, &corpus, &config.epoch_policy(), epoch_steps, config.train.max_steps, |step, _, tr| {
        let done = step + 1;
        if done % epoch_steps == 0 {
            trace.push((done, batch_regression(&tr.model, &tr.frozen, &probe)?));
        }
        Ok(())
    })?;
    models.den = Some(trainer.model);
    Ok((models, TrainSummary { epochs, probe: trace }))
}

/// Train the denoiser. The checkpoint at `ckpt` must hold the semantic
/// encoders; the per-epoch log goes to `log`.
pub fn cmd_train(manifest: &Manifest, config: &Config, ckpt: &Path, out: &Path, log: &Path) -> Result<TrainSummary> {
    let models = base_models(Some(ckpt), config)?;
    let pieces = load_corpus(manifest, Some(Split::Train), config.fragment.notation)?;
    let pieces = annotated(&models, &pieces)?;
    let (models, summary) = train_models(models, &pieces)?;
    let mut csv = Vec::new();
    write_epoch_log(&summary.epochs, &mut csv)?;
    write(log, csv)?;
    models.save(out)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSidecar {
    pub seed: u64,
    pub schedule: crate::config::ScheduleSection,
    pub prompt: Prompt,
    pub steps: usize,
    pub refrag_every: usize,
    pub guidance: f64,
    pub sections: Vec<SectionAnnotation>,
}

pub fn load_prompt(path: &Path) -> Result<Prompt> {
    let p: Prompt = serde_json::from_slice(&read(path)?).map_err(|e| Error::ConfigInvalid(format!("prompt {}: {e}", path.display())))?;
    p.validate()?;
    Ok(p)
}

/// Prompt files for annotated pieces, one per piece.
pub fn prompt_for(piece: &AnnotatedPiece) -> Prompt {
    Prompt::from_piece(&piece.bars, &piece.sections)
}

/// Prompt taken from an existing MIDI file: its recognized chords, its
/// rhythm, and the sections of its sidecar (or one section over the piece).
pub fn cmd_prompt(smf: &Path, out: &Path) -> Result<Prompt> {
    let score = quantize(&parse_midi(&read(smf)?)?);
    let mut piece = CorpusPiece::from_score(smf.display().to_string(), score, Notation::Cp)?;
    let side = sibling(smf, SECTIONS_SUFFIX);
    if side.is_file() {
        piece.sections = Some(serde_json::from_slice(&read(&side)?).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", side.display())))?);
    }
    let prompt = Prompt::from_piece(&piece.bars, &piece.sections_or(None)?);
    prompt.validate()?;
    write(out, serde_json::to_string_pretty(&prompt)?)?;
    Ok(prompt)
}

/// Sample a piece for `prompt` and write it as a standard MIDI file at
/// `out`, with a JSON sidecar next to it. With `dump_activations`, the
/// denoiser's intermediate activations on the final piece go to a CSV.
pub fn cmd_generate(
    ckpt: &Path,
    prompt: &Prompt,
    seed: u64,
    overrides: &GenerateOverrides,
    out: &Path,
    dump_activations: bool,
) -> Result<GenerationSidecar> {
    let models = Models::load(ckpt)?;
    let mut den = models.den()?.clone();
    if overrides.variance_preserving {
        den.schedule = den.schedule.clone().with_variance_preserving(true);
    }
    let frozen = models.jsp()?.frozen();
    let mut gen_config = models.config.generate_config();
    if let Some(k) = overrides.refrag_every {
        gen_config.refrag_every = k;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = generate(prompt, &den, &frozen, models.frag.as_ref(), &gen_config, &mut rng)?;
    write(out, write_midi(&dequantize(&g.score)))?;
    if dump_activations {
        let piece = CorpusPiece::from_score(String::new(), g.score.clone(), Notation::Cp)?;
        let mut csv = Vec::new();
        write_activations(&den, &frozen, &piece.bars, &g.sections, seed, &mut csv)?;
        write(&sibling(out, ".activations.csv"), csv)?;
    }
    let sidecar = GenerationSidecar {
        seed,
        schedule: crate::config::ScheduleSection {
            kind: models.config.schedule.kind,
            steps: den.schedule.steps,
            variance_preserving: models.config.schedule.variance_preserving || overrides.variance_preserving,
        },
        prompt: prompt.clone(),
        steps: g.steps,
        refrag_every: gen_config.refrag_every,
        guidance: gen_config.guidance,
        sections: g.sections,
    };
    write(&sibling(out, ".json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(sidecar)
}

/// Command-line adjustments applied on top of a checkpoint's configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GenerateOverrides {
    pub refrag_every: Option<usize>,
    pub variance_preserving: bool,
}

/// One t = 1 forward pass over `bars`, with seeded noise.
fn forward_at_first_step(
    den: &Denoiser,
    frozen: &FrozenTables,
    bars: &[EventBar],
    sections: &[SectionAnnotation],
    seed: u64,
) -> Result<(Graph, crate::denoiser::DenoiseOutput, Vec<u8>)> {
    let piece = DiffusionPiece::from_bars(bars, sections)?;
    let n = piece.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = frozen.encode(&piece.triplets);
    let z1 = perturb_with(&den.schedule, &z0, &standard_normal(n, z0.cols, &mut rng), 1);
    let input = DenoiseInput::new(Segments::single(n), piece.cond.clone(), vec![1])?;
    let mut g = Graph::new();
    let zv = g.input(z1);
    let out = den.forward(&mut g, frozen, zv, &input)?;
    Ok((g, out, piece.triplets.iter().map(|t| t.note).collect()))
}

fn write_activations(
    den: &Denoiser,
    frozen: &FrozenTables,
    bars: &[EventBar],
    sections: &[SectionAnnotation],
    seed: u64,
    mut out: impl std::io::Write,
) -> Result<()> {
    if bars.iter().all(|b| b.notes.is_empty()) {
        return Ok(());
    }
    let (g, fwd, _) = forward_at_first_step(den, frozen, bars, sections, seed)?;
    writeln!(out, "name,row,values")?;
    for (name, v) in &fwd.activations {
        let t: &Tensor = g.value(*v);
        for r in 0..t.rows {
            let vals: Vec<String> = t.row(r).iter().map(|x| x.to_string()).collect();
            writeln!(out, "{name},{r},{}", vals.join(" "))?;
        }
    }
    Ok(())
}

/// Pitch predictions of a trained denoiser at its last reverse step, given
/// the piece's own chords and sections.
pub struct DenoiserPitchModel<'a> {
    pub den: &'a Denoiser,
    pub frozen: &'a FrozenTables,
    pub fragmenter: Option<&'a FragModel>,
    pub seed: u64,
}

impl PitchModel for DenoiserPitchModel<'_> {
    fn pitch_log_probs(&self, q: &QuantizedScore) -> Result<Vec<f64>> {
        let piece = CorpusPiece::from_score(String::new(), q.clone(), Notation::Cp)?;
        let sections = piece.sections_or(self.fragmenter)?;
        let (g, fwd, pitches) = forward_at_first_step(self.den, self.frozen, &piece.bars, &sections, self.seed)?;
        let logits = g.value(fwd.logits[0]);
        Ok(pitches
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let row = logits.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row[p as usize] - lse
            })
            .collect())
    }
}

/// What to evaluate: the pieces of a manifest or a list of MIDI files.
pub enum EvalInputs<'a> {
    Manifest(&'a Manifest, Option<Split>),
    Files(&'a [PathBuf]),
}

fn eval_scores(inputs: &EvalInputs) -> Result<Vec<(String, QuantizedScore)>> {
    match inputs {
        EvalInputs::Manifest(m, split) => Ok(load_corpus(m, *split, Notation::Cp)?.into_iter().map(|p| (p.name, p.score)).collect()),
        EvalInputs::Files(files) => {
            if files.is_empty() {
                return Err(Error::MissingInput("no MIDI files to evaluate".into()));
            }
            files.iter().map(|f| Ok((f.display().to_string(), quantize(&parse_midi(&read(f)?)?)))).collect()
        }
    }
}

/// Metric report over `inputs`, written to `<out>.csv` and `<out>.json`.
/// Perplexity is filled in when `ckpt` holds a trained denoiser.
pub fn cmd_evaluate(inputs: &EvalInputs, ckpt: Option<&Path>, seed: u64, out: &Path) -> Result<MetricReport> {
    let models = ckpt.map(Models::load).transpose()?;
    let scores = eval_scores(inputs)?;
    let frozen = models.as_ref().and_then(|m| m.jsp.as_ref()).map(|j| j.frozen());
    let pitch_model = match (&models, &frozen) {
        (Some(m), Some(f)) => m.den.as_ref().map(|den| DenoiserPitchModel { den, frozen: f, fragmenter: m.frag.as_ref(), seed }),
        _ => None,
    };
    let pieces: Vec<(String, PieceMetrics)> = scores
        .par_iter()
        .map(|(name, q)| {
            let ppl = pitch_model.as_ref().map(|pm| compute_ppl(Some(pm as &dyn PitchModel), std::slice::from_ref(q))).transpose()?;
            Ok((name.clone(), PieceMetrics::compute(q, &recognize_chords(q), ppl)?))
        })
        .collect::<Result<_>>()?;
    let report = MetricReport::new(pieces)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write(&sibling(out, ".csv"), csv)?;
    write(&sibling(out, ".json"), report.to_json()?)?;
    Ok(report)
}

/// Self-similarity matrix and fitness scape of one MIDI file, each as CSV
/// and as an 8-bit PGM image.
pub fn cmd_plot(smf: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let q = quantize(&parse_midi(&read(smf)?)?);
    let ssm = compute_ssm(&q);
    let scape = compute_fitness_scape(&ssm);
    let mut written = Vec::new();
    for (tag, rows) in [("ssm", ssm.rows()), ("fitness", scape.grid())] {
        let mut csv = Vec::new();
        write_matrix_csv(&rows, &mut csv)?;
        let mut pgm = Vec::new();
        write_pgm(&rows, &mut pgm)?;
        for (ext, bytes) in [("csv", csv), ("pgm", pgm)] {
            let path = sibling(out, &format!(".{tag}.{ext}"));
            write(&path, bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Write `pieces` as MIDI files with section sidecars into `dir`.
pub fn write_corpus(pieces: &[AnnotatedPiece], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    pieces
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let path = dir.join(format!("{stem}_{i:03}.mid"));
            let q = crate::notation::bars_to_score(&p.bars);
            write(&path, write_midi(&dequantize(&q)))?;
            write(&sibling(&path, SECTIONS_SUFFIX), serde_json::to_string(&p.sections)?)?;
            Ok(path)
        })
        .collect()
}

/// Caps the global thread pool at `MUSICDIFF_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MUSICDIFF_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::ConfigInvalid(format!("MUSICDIFF_THREADS='{v}' is not a count")))?;
    if n == 0 {
        return Err(Error::ConfigInvalid("MUSICDIFF_THREADS must be >= 1".into()));
    }
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
