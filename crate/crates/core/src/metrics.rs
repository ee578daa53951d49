//! Evaluation metrics over quantized scores: pitch, rhythm and structure
//! statistics, perplexity, bar self-similarity and the fitness scape.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::midi::QuantizedScore;
use crate::notation::{ChordLabel, NO_CHORD};

/// Window length (bars) for the pitch-class entropy.
pub const PCH_WINDOW_BARS: usize = 4;
/// Minimum segment length (bars) counted as a repetition.
pub const SI_MIN_BARS: usize = 4;
pub const SI_THRESHOLD: f64 = 0.95;
/// Notes longer than this many steps count as long.
pub const PRS_MIN_STEPS: u32 = 4;

fn non_empty_bars(q: &QuantizedScore) -> impl Iterator<Item = usize> + '_ {
    (0..q.num_bars()).filter(|&b| !q.bar_notes(b).is_empty())
}

fn check_non_empty(q: &QuantizedScore) -> Result<()> {
    if q.notes().is_empty() {
        Err(Error::EmptyScore)
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchMetrics {
    pub pcu: f64,
    pub tup: f64,
    pub pr: f64,
    pub aps: f64,
}

pub fn compute_pitch_metrics(q: &QuantizedScore) -> Result<PitchMetrics> {
    check_non_empty(q)?;
    let (mut pcu, mut tup, mut pr, mut bars) = (0usize, 0usize, 0u32, 0usize);
    for b in non_empty_bars(q) {
        let notes = q.bar_notes(b);
        let mut classes = [false; 12];
        let mut pitches = [false; 128];
        let (mut lo, mut hi) = (u8::MAX, 0u8);
        for n in notes {
            classes[(n.pitch % 12) as usize] = true;
            pitches[n.pitch as usize] = true;
            lo = lo.min(n.pitch);
            hi = hi.max(n.pitch);
        }
        pcu += classes.iter().filter(|&&c| c).count();
        tup += pitches.iter().filter(|&&c| c).count();
        pr += (hi - lo) as u32;
        bars += 1;
    }
    let mut seq: Vec<(u32, u8)> = q.notes().iter().map(|n| (n.onset, n.pitch)).collect();
    seq.sort_unstable();
    let steps: u64 = seq.windows(2).map(|w| (w[1].1 as i32 - w[0].1 as i32).unsigned_abs() as u64).sum();
    let aps = if seq.len() < 2 { 0.0 } else { steps as f64 / (seq.len() - 1) as f64 };
    let nb = bars as f64;
    Ok(PitchMetrics { pcu: pcu as f64 / nb, tup: tup as f64 / nb, pr: pr as f64 / nb, aps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhythmMetrics {
    pub isr: f64,
    pub prs: f64,
    pub ioi: f64,
    pub gs: f64,
}

fn onset_pattern(q: &QuantizedScore, b: usize) -> Vec<bool> {
    let spb = q.semiquavers_per_bar;
    let mut pat = vec![false; spb as usize];
    for n in q.bar_notes(b) {
        pat[(n.onset % spb) as usize] = true;
    }
    pat
}

pub fn compute_rhythm_metrics(q: &QuantizedScore) -> Result<RhythmMetrics> {
    check_non_empty(q)?;
    let total = q.total_steps() as usize;
    let mut sounding = vec![false; total];
    for n in q.notes() {
        for s in n.onset..n.end().min(total as u32) {
            sounding[s as usize] = true;
        }
    }
    let isr = sounding.iter().filter(|&&s| s).count() as f64 / total as f64;
    let long = q.notes().iter().filter(|n| n.duration > PRS_MIN_STEPS).count();
    let prs = long as f64 / q.notes().len() as f64;
    let onsets: Vec<u32> = q.notes().iter().map(|n| n.onset).collect::<BTreeSet<_>>().into_iter().collect();
    let ioi = if onsets.len() < 2 {
        0.0
    } else {
        let span: u32 = onsets.windows(2).map(|w| w[1] - w[0]).sum();
        span as f64 / (onsets.len() - 1) as f64 / 4.0
    };
    let spb = q.semiquavers_per_bar as f64;
    let patterns: Vec<Vec<bool>> = (0..q.num_bars()).map(|b| onset_pattern(q, b)).collect();
    let gs = if patterns.len() < 2 {
        0.0
    } else {
        let sum: f64 = patterns.windows(2).map(|w| 1.0 - w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count() as f64 / spb).sum();
        sum / (patterns.len() - 1) as f64
    };
    Ok(RhythmMetrics { isr, prs, ioi, gs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub pch: f64,
    pub cpi: f64,
    pub si: f64,
}

/// Shannon entropy in bits of a count histogram.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

fn pch(q: &QuantizedScore) -> f64 {
    let mut total = 0.0;
    let mut windows = 0usize;
    for start in (0..q.num_bars()).step_by(PCH_WINDOW_BARS) {
        let mut hist = [0u64; 12];
        for b in start..(start + PCH_WINDOW_BARS).min(q.num_bars()) {
            for n in q.bar_notes(b) {
                hist[(n.pitch % 12) as usize] += 1;
            }
        }
        if hist.iter().any(|&c| c > 0) {
            total += entropy_bits(&hist);
            windows += 1;
        }
    }
    if windows == 0 {
        0.0
    } else {
        total / windows as f64
    }
}

/// Fraction of bar-to-bar transitions whose ordered pair occurs once.
pub fn chord_progression_irregularity(chords: &[u8]) -> f64 {
    if chords.len() < 2 {
        return 0.0;
    }
    let mut counts: BTreeMap<(u8, u8), usize> = BTreeMap::new();
    for w in chords.windows(2) {
        *counts.entry((w[0], w[1])).or_default() += 1;
    }
    let unique = chords.windows(2).filter(|w| counts[&(w[0], w[1])] == 1).count();
    unique as f64 / (chords.len() - 1) as f64
}

/// Mean SSM similarity between the segments starting at `a` and `b`.
pub fn segment_similarity(ssm: &SelfSimilarityMatrix, a: usize, b: usize, len: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..len {
        s += ssm.get(a + k, b + k);
    }
    s / len as f64
}

/// Fraction of bars inside some segment (≥ [`SI_MIN_BARS`]) that has a
/// non-overlapping repetition with mean similarity ≥ [`SI_THRESHOLD`].
pub fn structure_indicator(ssm: &SelfSimilarityMatrix) -> f64 {
    let n = ssm.len();
    if n == 0 {
        return 0.0;
    }
    // coverage difference array: +1 at a segment start, -1 after its end
    let mut marks = vec![0i64; n + 1];
    for len in SI_MIN_BARS..=n / 2 {
        for a in 0..=n - len {
            for b in a + len..=n - len {
                if segment_similarity(ssm, a, b, len) >= SI_THRESHOLD {
                    marks[a] += 1;
                    marks[a + len] -= 1;
                    marks[b] += 1;
                    marks[b + len] -= 1;
                }
            }
        }
    }
    let mut depth = 0;
    let mut covered = 0;
    for m in &marks[..n] {
        depth += m;
        if depth > 0 {
            covered += 1;
        }
    }
    covered as f64 / n as f64
}

pub fn compute_structure_metrics(q: &QuantizedScore, chords: &[Option<ChordLabel>]) -> Result<StructureMetrics> {
    check_non_empty(q)?;
    if chords.len() != q.num_bars() {
        return Err(Error::ChordListMismatch { bars: q.num_bars(), got: chords.len() });
    }
    let idx: Vec<u8> = chords.iter().map(|c| c.map_or(NO_CHORD, |c| c.index())).collect();
    let ssm = compute_ssm(q);
    Ok(StructureMetrics { pch: pch(q), cpi: chord_progression_irregularity(&idx), si: structure_indicator(&ssm) })
}

/// Symmetric bar-by-bar similarity with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SelfSimilarityMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = f(i, j).clamp(0.0, 1.0);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        SelfSimilarityMatrix { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Per-bar feature: normalized pitch-class histogram of onsets followed by
/// the normalized onset pattern.
pub fn bar_features(q: &QuantizedScore, b: usize) -> Vec<f64> {
    let notes = q.bar_notes(b);
    let spb = q.semiquavers_per_bar as usize;
    let mut f = vec![0.0; 12 + spb];
    if notes.is_empty() {
        return f;
    }
    for n in notes {
        f[(n.pitch % 12) as usize] += 1.0;
    }
    let pattern = onset_pattern(q, b);
    let hits = pattern.iter().filter(|&&p| p).count() as f64;
    for (k, &p) in pattern.iter().enumerate() {
        if p {
            f[12 + k] = 1.0 / hits;
        }
    }
    let count = notes.len() as f64;
    f[..12].iter_mut().for_each(|x| *x /= count);
    f
}

/// Cosine similarity of two nonnegative feature vectors; two empty bars are
/// identical and an empty bar shares nothing with a non-empty one.
pub fn feature_similarity(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

pub fn compute_ssm(q: &QuantizedScore) -> SelfSimilarityMatrix {
    let feats: Vec<Vec<f64>> = (0..q.num_bars()).map(|b| bar_features(q, b)).collect();
    SelfSimilarityMatrix::from_fn(feats.len(), |i, j| feature_similarity(&feats[i], &feats[j]))
}

/// Fitness of every segment, indexed by `(start, length)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessScape {
    n: usize,
    /// `values[len - 1][start]` for `start + len <= n`.
    values: Vec<Vec<f64>>,
}

impl FitnessScape {
    pub fn bars(&self) -> usize {
        self.n
    }

    pub fn get(&self, start: usize, len: usize) -> f64 {
        self.values[len - 1][start]
    }

    /// Fitness of the segment of `len` bars centred on bar `center` (for even
    /// lengths the centre is the later of the two middle bars).
    pub fn at_center(&self, center: usize, len: usize) -> Option<f64> {
        let start = center.checked_sub(len / 2)?;
        (len >= 1 && start + len <= self.n).then(|| self.get(start, len))
    }

    /// Dense `len × start` grid with zeros outside the triangle.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|row| {
                let mut r = row.clone();
                r.resize(self.n, 0.0);
                r
            })
            .collect()
    }
}

pub fn compute_fitness_scape(ssm: &SelfSimilarityMatrix) -> FitnessScape {
    let n = ssm.len();
    let values = (1..=n)
        .map(|len| {
            (0..=n - len)
                .map(|start| {
                    let mut best = 0.0f64;
                    for other in 0..=n - len {
                        if other + len <= start || start + len <= other {
                            best = best.max(segment_similarity(ssm, start, other, len));
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    FitnessScape { n, values }
}

/// Per-note pitch log-likelihoods from some predictive model.
pub trait PitchModel {
    fn pitch_log_probs(&self, q: &QuantizedScore) -> Result<Vec<f64>>;
}

/// The 128-way uniform predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPitchModel;

impl PitchModel for UniformPitchModel {
    fn pitch_log_probs(&self, q: &QuantizedScore) -> Result<Vec<f64>> {
        Ok(vec![-(128f64).ln(); q.notes().len()])
    }
}

/// `exp` of the mean negative log-likelihood over every note in `corpus`.
pub fn compute_ppl(model: Option<&dyn PitchModel>, corpus: &[QuantizedScore]) -> Result<f64> {
    let model = model.ok_or_else(|| Error::ModelMissing("perplexity needs a trained pitch model".into()))?;
    let mut total = 0.0;
    let mut count = 0usize;
    for q in corpus {
        for lp in model.pitch_log_probs(q)? {
            total -= lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyScore);
    }
    Ok((total / count as f64).exp())
}

/// Smoothed pitch-class distribution of a set of scores.
pub fn pitch_class_distribution<'a>(scores: impl IntoIterator<Item = &'a QuantizedScore>, smoothing: f64) -> [f64; 12] {
    let mut h = [smoothing; 12];
    for q in scores {
        for n in q.notes() {
            h[(n.pitch % 12) as usize] += 1.0;
        }
    }
    let s: f64 = h.iter().sum();
    h.map(|x| x / s)
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// All report columns for one piece.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PieceMetrics {
    pub ppl: Option<f64>,
    pub pcu: f64,
    pub tup: f64,
    pub pr: f64,
    pub aps: f64,
    pub isr: f64,
    pub prs: f64,
    pub ioi: f64,
    pub gs: f64,
    pub pch: f64,
    pub cpi: f64,
    pub si: f64,
}

pub const REPORT_COLUMNS: [&str; 12] = ["PPL", "PCU", "TUP", "PR", "APS", "ISR", "PRS", "IOI", "GS", "PCH", "CPI", "SI"];

impl PieceMetrics {
    pub fn compute(q: &QuantizedScore, chords: &[Option<ChordLabel>], ppl: Option<f64>) -> Result<Self> {
        let p = compute_pitch_metrics(q)?;
        let r = compute_rhythm_metrics(q)?;
        let s = compute_structure_metrics(q, chords)?;
        Ok(PieceMetrics {
            ppl,
            pcu: p.pcu,
            tup: p.tup,
            pr: p.pr,
            aps: p.aps,
            isr: r.isr,
            prs: r.prs,
            ioi: r.ioi,
            gs: r.gs,
            pch: s.pch,
            cpi: s.cpi,
            si: s.si,
        })
    }

    pub fn values(&self) -> [Option<f64>; 12] {
        [
            self.ppl,
            Some(self.pcu),
            Some(self.tup),
            Some(self.pr),
            Some(self.aps),
            Some(self.isr),
            Some(self.prs),
            Some(self.ioi),
            Some(self.gs),
            Some(self.pch),
            Some(self.cpi),
            Some(self.si),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pieces: Vec<(String, PieceMetrics)>,
    pub mean: PieceMetrics,
}

impl MetricReport {
    pub fn new(pieces: Vec<(String, PieceMetrics)>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = pieces.len() as f64;
        let avg = |f: fn(&PieceMetrics) -> f64| pieces.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let ppl = pieces.iter().map(|(_, m)| m.ppl).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
        let mean = PieceMetrics {
            ppl,
            pcu: avg(|m| m.pcu),
            tup: avg(|m| m.tup),
            pr: avg(|m| m.pr),
            aps: avg(|m| m.aps),
            isr: avg(|m| m.isr),
            prs: avg(|m| m.prs),
            ioi: avg(|m| m.ioi),
            gs: avg(|m| m.gs),
            pch: avg(|m| m.pch),
            cpi: avg(|m| m.cpi),
            si: avg(|m| m.si),
        };
        Ok(MetricReport { pieces, mean })
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "piece,{}", REPORT_COLUMNS.join(","))?;
        let row = |m: &PieceMetrics| m.values().iter().map(|v| v.map_or(String::new(), |x| format!("{x}"))).collect::<Vec<_>>().join(",");
        for (name, m) in &self.pieces {
            writeln!(out, "{name},{}", row(m))?;
        }
        writeln!(out, "mean,{}", row(&self.mean))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let piece = |name: &str, m: &PieceMetrics| {
            let mut obj = serde_json::Map::new();
            obj.insert("piece".into(), name.into());
            for (k, v) in REPORT_COLUMNS.iter().zip(m.values()) {
                obj.insert((*k).into(), v.map_or(serde_json::Value::Null, Into::into));
            }
            serde_json::Value::Object(obj)
        };
        let doc = serde_json::json!({
            "columns": REPORT_COLUMNS,
            "pieces": self.pieces.iter().map(|(n, m)| piece(n, m)).collect::<Vec<_>>(),
            "mean": piece("mean", &self.mean),
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Matrix as comma-separated rows.
pub fn write_matrix_csv(rows: &[Vec<f64>], mut out: impl Write) -> Result<()> {
    for r in rows {
        writeln!(out, "{}", r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))?;
    }
    Ok(())
}

/// Binary 8-bit graymap of values in `[0, 1]` (white = 1).
pub fn write_pgm(rows: &[Vec<f64>], mut out: impl Write) -> Result<()> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = rows.iter().flat_map(|r| r.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    out.write_all(&bytes)?;
    Ok(())
}
