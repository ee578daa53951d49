use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use musicdiff::config::Config;
use musicdiff::midi::{write_midi, MidiNote, Score, TimeSignature};
use musicdiff::pipeline::{cmd_evaluate, EvalInputs, Models};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_musicdiff"));
    c.env("MUSICDIFF_THREADS", "2");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_config() -> Config {
    let mut c = Config::default();
    c.model.dim = 8;
    c.model.layers = 1;
    c.schedule.steps = 5;
    c.train.epoch_steps = 5;
    c.train.max_steps = Some(10);
    c.jsp.steps = 20;
    c.fragment.epochs = 3;
    c
}

/// Every pipeline stage through the binary; returns the artifact paths.
fn pipeline(dir: &Path) -> Vec<PathBuf> {
    fs::write(dir.join("tiny.toml"), tiny_config().to_toml()).unwrap();
    let steps: [&[&str]; 9] = [
        &["synth", "--count", "8", "--out", "corpus"],
        &["ingest", "corpus", "--out", "manifest.json"],
        &["train-frag", "--manifest", "manifest.json", "--out", "frag.ckpt"],
        &["fragment", "--manifest", "manifest.json", "--ckpt", "frag.ckpt", "--out", "sections.json"],
        &["jsp-pretrain", "--manifest", "manifest.json", "--ckpt", "frag.ckpt", "--out", "jsp.ckpt"],
        &["train", "--manifest", "manifest.json", "--ckpt", "jsp.ckpt", "--out", "model.ckpt"],
        &["prompt", "corpus/phrase_003.mid", "--out", "prompt.json"],
        &["generate", "--ckpt", "model.ckpt", "--prompt", "prompt.json", "--out", "gen.mid", "--seed", "7"],
        &["evaluate", "--manifest", "manifest.json", "--ckpt", "model.ckpt", "--out", "report"],
    ];
    for args in steps {
        let mut args = args.to_vec();
        args.extend(["--config", "tiny.toml"]);
        ok(&args, dir);
    }
    ok(&["plot", "gen.mid", "--out", "gen"], dir);
    [
        "manifest.json",
        "frag.ckpt",
        "sections.json",
        "jsp.ckpt",
        "model.ckpt",
        "model.ckpt.log.csv",
        "prompt.json",
        "gen.mid",
        "gen.mid.json",
        "report.csv",
        "report.json",
        "gen.ssm.pgm",
        "gen.fitness.csv",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect()
}

#[test]
fn full_pipeline_is_bit_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (x, y) in pipeline(a.path()).iter().zip(pipeline(b.path())) {
        let (bx, by) = (fs::read(x).unwrap(), fs::read(&y).unwrap());
        assert!(!bx.is_empty(), "{} is empty", x.display());
        assert!(bx == by, "{} differs between runs", x.display());
    }
    let log = fs::read_to_string(a.path().join("model.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("epoch,steps,loss,"));
    assert_eq!(log.lines().count(), 3);

    // same seed, same bytes; the checkpoint survives load and save unchanged
    let dir = a.path();
    ok(&["generate", "--ckpt", "model.ckpt", "--prompt", "prompt.json", "--out", "again.mid", "--seed", "7"], dir);
    assert_eq!(fs::read(dir.join("gen.mid")).unwrap(), fs::read(dir.join("again.mid")).unwrap());
    let ckpt = dir.join("model.ckpt");
    Models::load(&ckpt).unwrap().save(&dir.join("resaved.ckpt")).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(dir.join("resaved.ckpt")).unwrap());

    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert!(report["mean"]["PPL"].as_f64().is_some_and(|p| p >= 1.0));
}

#[test]
fn two_bar_piece_reproduces_metric_values() {
    let dir = tempfile::tempdir().unwrap();
    // C E G crotchets, then a whole-note C
    let notes = [(60, 0, 480), (64, 480, 480), (67, 960, 480), (60, 1920, 1920)].map(|(pitch, onset, duration)| MidiNote {
        pitch,
        onset,
        duration,
        velocity: 90,
        track: 0,
    });
    let score = Score::new(480, TimeSignature::COMMON, notes.to_vec()).unwrap();
    let file = dir.path().join("two.mid");
    fs::write(&file, write_midi(&score)).unwrap();
    let report = cmd_evaluate(&EvalInputs::Files(&[file]), None, 0, &dir.path().join("out")).unwrap();
    let m = report.pieces[0].1;
    let expect = [
        (m.pcu, 2.0),
        (m.tup, 2.0),
        (m.pr, 3.5),
        (m.aps, 14.0 / 3.0),
        (m.isr, 28.0 / 32.0),
        (m.prs, 0.25),
        (m.ioi, 4.0 / 3.0),
        (m.gs, 1.0 - 2.0 / 16.0),
        (m.pch, 1.5),
        (m.cpi, 1.0),
        (m.si, 0.0),
    ];
    for (i, (got, want)) in expect.iter().enumerate() {
        assert!((got - want).abs() < 1e-12, "column {i}: {got} vs {want}");
    }
    assert_eq!(m.ppl, None);
    let csv = fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert!(csv.starts_with("piece,PPL,PCU,TUP,PR,APS,ISR,PRS,IOI,GS,PCH,CPI,SI\n"));
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string()
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = run(&["evaluate", "--out", "r", "absent.mid"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error code="));

    assert_eq!(run(&["evaluate", "--out", "r"], d).status.code(), Some(2));
    assert_eq!(run(&["--bogus-flag", "plot"], d).status.code(), Some(3));

    let mut bad = Config::default();
    bad.model.dim = 3;
    fs::write(d.join("bad.toml"), bad.to_toml()).unwrap();
    assert_eq!(run(&["--config", "bad.toml", "synth", "--out", "c"], d).status.code(), Some(3));
    fs::write(d.join("garbled.toml"), "seed = [").unwrap();
    assert_eq!(run(&["--config", "garbled.toml", "synth", "--out", "c"], d).status.code(), Some(3));

    ok(&["synth", "--count", "2", "--out", "c"], d);
    ok(&["ingest", "c", "--out", "m.json"], d);
    let victim = d.join("c/phrase_001.mid");
    let mut bytes = fs::read(&victim).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    fs::write(&victim, bytes).unwrap();
    let out = run(&["fragment", "--manifest", "m.json", "--ckpt", "none.ckpt", "--out", "s.json"], d);
    assert_eq!(out.status.code(), Some(4), "{}", error_line(&out));

    assert_eq!(run(&["ingest", "no_such_dir", "--out", "m2.json"], d).status.code(), Some(2));
}
