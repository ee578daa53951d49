//! Structural fragmentation: bar-aligned candidate windows, a small window
//! classifier with a boundary-offset head, and the classification +
//! regression + SSIM training loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::midi::QuantizedScore;
use crate::notation::{EventBar, EventStream, Notation, NUM_SECTIONS};
use crate::optim::{sgd_step, Adam, AdamConfig};

pub const NUM_FEATURES: usize = 31;
const STEPS_PER_BAR: u32 = 16;

/// A labelled half-open span `[start, end)` of grid steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SectionAnnotation {
    pub start: u32,
    pub end: u32,
    pub label: u8,
}

impl SectionAnnotation {
    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &SectionAnnotation) -> u32 {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn iou(&self, other: &SectionAnnotation) -> f64 {
        let inter = self.overlap(other) as f64;
        let union = (self.len() + other.len()) as f64 - inter;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Check the ordering/disjointness invariant of one piece's annotations.
pub fn validate_annotations(sections: &[SectionAnnotation]) -> Result<()> {
    for s in sections {
        if s.start >= s.end || s.label as usize >= NUM_SECTIONS {
            return Err(Error::InvalidScore(format!("bad section {s:?}")));
        }
    }
    if sections.windows(2).any(|w| w[1].start < w[0].end) {
        return Err(Error::InvalidScore("sections overlap or are unsorted".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    L2r,
    #[default]
    Global,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2r" => Ok(Strategy::L2r),
            "global" => Ok(Strategy::Global),
            other => Err(Error::ConfigInvalid(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateWindow {
    /// Center in grid steps.
    pub center: f64,
    pub size_bars: u32,
    pub class_probs: [f64; NUM_SECTIONS],
    /// Predicted (center, size) corrections in bars.
    pub offsets: [f64; 2],
}

impl CandidateWindow {
    pub fn from_bars(start_bar: usize, size_bars: usize, class_probs: [f64; NUM_SECTIONS]) -> Self {
        let spb = STEPS_PER_BAR as f64;
        CandidateWindow {
            center: (start_bar as f64 + size_bars as f64 / 2.0) * spb,
            size_bars: size_bars as u32,
            class_probs,
            offsets: [0.0; 2],
        }
    }

    pub fn size_steps(&self) -> f64 {
        (self.size_bars * STEPS_PER_BAR) as f64
    }

    pub fn start(&self) -> f64 {
        self.center - self.size_steps() / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.size_steps() / 2.0
    }

    pub fn start_bar(&self) -> usize {
        (self.start() / STEPS_PER_BAR as f64).round() as usize
    }

    pub fn confidence(&self) -> f64 {
        self.class_probs.iter().cloned().fold(0.0, f64::max)
    }

    /// Highest-probability class; ties go to the lower label.
    pub fn label(&self) -> u8 {
        argmax(&self.class_probs) as u8
    }

    /// Confidence weighted by window length: the quantity the search maximizes.
    pub fn mass(&self) -> f64 {
        self.confidence() * self.size_bars as f64
    }

    pub fn as_annotation(&self) -> SectionAnnotation {
        SectionAnnotation { start: self.start().round() as u32, end: self.end().round() as u32, label: self.label() }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// True when consecutive windows are ordered and do not overlap.
pub fn windows_non_overlapping(windows: &[CandidateWindow]) -> bool {
    windows.windows(2).all(|w| (w[0].size_steps() + w[1].size_steps()) / 2.0 <= w[1].center - w[0].center)
}

/// Feature vector of bars `[start, start + size)`.
pub fn window_features(bars: &[EventBar], start: usize, size: usize) -> [f64; NUM_FEATURES] {
    let mut f = [0.0; NUM_FEATURES];
    let span = &bars[start..start + size];
    let pitches: Vec<f64> = span.iter().flat_map(|b| b.notes.iter().map(|n| n.pitch as f64)).collect();
    if !pitches.is_empty() {
        let n = pitches.len() as f64;
        for b in span {
            for note in &b.notes {
                f[(note.pitch % 12) as usize] += 1.0 / n;
            }
        }
        let mean = pitches.iter().sum::<f64>() / n;
        let var = pitches.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        f[28] = mean / 127.0;
        f[29] = var.sqrt() / 127.0;
    }
    for b in span {
        let mut seen = [false; 16];
        for note in &b.notes {
            seen[note.position as usize % 16] = true;
        }
        for (pos, hit) in seen.iter().enumerate() {
            if *hit {
                f[12 + pos] += 1.0 / size as f64;
            }
        }
    }
    let changes = (start + 1..start + size).filter(|&b| bars[b].chord != bars[b - 1].chord).count();
    f[30] = changes as f64 / size as f64;
    f
}

/// Anything that can assign class probabilities to a bar span.
pub trait WindowScorer {
    fn class_probs(&self, bars: &[EventBar], start: usize, size: usize) -> [f64; NUM_SECTIONS];
    fn max_window_bars(&self) -> usize;
}

struct ScoredWindow {
    start: usize,
    size: usize,
    probs: [f64; NUM_SECTIONS],
    mass: f64,
}

fn score_placements(scorer: &impl WindowScorer, bars: &[EventBar]) -> Vec<Vec<ScoredWindow>> {
    // table[start] lists the windows beginning at `start`, by increasing size
    let n = bars.len();
    let max = scorer.max_window_bars().max(1);
    (0..n)
        .map(|start| {
            (1..=max.min(n - start))
                .map(|size| {
                    let probs = scorer.class_probs(bars, start, size);
                    let conf = probs.iter().cloned().fold(0.0, f64::max);
                    ScoredWindow { start, size, probs, mass: conf * size as f64 }
                })
                .collect()
        })
        .collect()
}

/// (mass, covered bars); compared lexicographically.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct Objective(f64, usize);

fn exact_search(table: &[Vec<ScoredWindow>], n: usize, m: usize) -> Vec<(usize, usize)> {
    // best[b][k]: best objective placing k windows inside bars [0, b)
    let neg = Objective(f64::NEG_INFINITY, 0);
    let mut best = vec![vec![neg; m + 1]; n + 1];
    let mut choice: Vec<Vec<Option<(usize, usize)>>> = vec![vec![None; m + 1]; n + 1];
    for row in best.iter_mut() {
        row[0] = Objective(0.0, 0);
    }
    for b in 1..=n {
        for k in 1..=m {
            let mut cur = best[b - 1][k];
            let mut pick = None;
            for start in (0..b).rev() {
                let size = b - start;
                let Some(w) = table[start].get(size - 1) else { continue };
                let prev = best[start][k - 1];
                if prev.0 == f64::NEG_INFINITY {
                    continue;
                }
                let cand = Objective(prev.0 + w.mass, prev.1 + size);
                if cand > cur {
                    cur = cand;
                    pick = Some((start, size));
                }
            }
            best[b][k] = cur;
            choice[b][k] = pick;
        }
    }
    let mut out = Vec::with_capacity(m);
    let (mut b, mut k) = (n, m);
    while k > 0 {
        match choice[b][k] {
            Some((start, size)) => {
                out.push((start, size));
                b = start;
                k -= 1;
            }
            None => b -= 1,
        }
    }
    out.reverse();
    out
}

fn greedy_search(table: &[Vec<ScoredWindow>], n: usize, m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(m);
    let mut cursor = 0;
    for k in 0..m {
        let remaining = m - k - 1;
        let mut pick: Option<&ScoredWindow> = None;
        for start in cursor..n {
            for w in &table[start] {
                if w.start + w.size + remaining > n {
                    continue;
                }
                let better = match pick {
                    None => true,
                    Some(p) => w.mass > p.mass || (w.mass == p.mass && w.size > p.size),
                };
                if better {
                    pick = Some(w);
                }
            }
        }
        let w = pick.expect("feasibility was checked up front");
        out.push((w.start, w.size));
        cursor = w.start + w.size;
    }
    out
}

/// Choose `m` non-overlapping bar-aligned windows maximizing total
/// confidence mass. `Global` is exact; `L2r` commits greedily from the left.
pub fn propose_candidates(scorer: &impl WindowScorer, stream: &EventStream, m: usize, strategy: Strategy) -> Result<Vec<CandidateWindow>> {
    if stream.is_empty() {
        return Err(Error::EmptyInput);
    }
    propose_on_bars(scorer, &stream.bars()?, m, strategy)
}

pub fn propose_on_bars(scorer: &impl WindowScorer, bars: &[EventBar], m: usize, strategy: Strategy) -> Result<Vec<CandidateWindow>> {
    let n = bars.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if m == 0 || m > n {
        return Err(Error::InfeasibleM { m, bars: n });
    }
    let table = score_placements(scorer, bars);
    let picks = match strategy {
        Strategy::Global => exact_search(&table, n, m),
        Strategy::L2r => greedy_search(&table, n, m),
    };
    Ok(picks.into_iter().map(|(start, size)| CandidateWindow::from_bars(start, size, table[start][size - 1].probs)).collect())
}

pub fn total_mass(windows: &[CandidateWindow]) -> f64 {
    windows.iter().map(CandidateWindow::mass).sum()
}

/// Population-moment SSIM loss between two pitch sequences.
pub fn ssim_loss(cand: &[f64], s: &[f64]) -> Result<f64> {
    if cand.is_empty() || s.is_empty() {
        return Err(Error::EmptyScope);
    }
    if cand.len() != s.len() {
        return Err(Error::LengthMismatch(format!("{} vs {}", cand.len(), s.len())));
    }
    Ok(crate::autodiff::ssim_value(cand, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragConfig {
    pub hidden: usize,
    pub max_window_bars: usize,
    pub max_sections: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Relative slack when preferring fewer windows of near-equal mass.
    pub mass_tolerance: f64,
}

impl Default for FragConfig {
    fn default() -> Self {
        FragConfig {
            hidden: 32,
            max_window_bars: 8,
            max_sections: 8,
            epochs: 300,
            lr: 1e-2,
            seed: 7,
            strategy: Strategy::Global,
            mass_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FragModel {
    pub config: FragConfig,
    pub store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w_cls: ParamId,
    b_cls: ParamId,
    w_reg: ParamId,
    b_reg: ParamId,
}

pub(crate) struct FragVars {
    pub log_probs: Var,
    pub offsets: Var,
}

impl FragModel {
    pub fn new(config: FragConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let mut store = ParamStore::new();
        let w1 = store.add("frag.w1", Tensor::randn(NUM_FEATURES, h, 1.0 / (NUM_FEATURES as f64).sqrt(), &mut rng));
        let b1 = store.add("frag.b1", Tensor::zeros(1, h));
        let w_cls = store.add("frag.w_cls", Tensor::randn(h, NUM_SECTIONS, 1.0 / (h as f64).sqrt(), &mut rng));
        let b_cls = store.add("frag.b_cls", Tensor::zeros(1, NUM_SECTIONS));
        let w_reg = store.add("frag.w_reg", Tensor::randn(h, 2, 0.1 / (h as f64).sqrt(), &mut rng));
        let b_reg = store.add("frag.b_reg", Tensor::zeros(1, 2));
        FragModel { config, store, w1, b1, w_cls, b_cls, w_reg, b_reg }
    }

    pub fn zeroed(config: FragConfig) -> Self {
        let mut m = Self::new(config);
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    /// Rebuild from a parameter store with the expected names.
    pub fn from_store(config: FragConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(config);
        for id in m.store.ids().collect::<Vec<_>>() {
            let name = m.store.name(id).to_string();
            let src = store.find(&name).ok_or_else(|| Error::InvalidCheckpoint(format!("missing tensor {name}")))?;
            if store.get(src).shape() != m.store.get(id).shape() {
                return Err(Error::InvalidCheckpoint(format!("shape of {name}")));
            }
            *m.store.get_mut(id) = store.get(src).clone();
        }
        Ok(m)
    }

    pub(crate) fn forward(&self, g: &mut Graph, feats: Var) -> FragVars {
        let (w1, b1) = (g.param(&self.store, self.w1), g.param(&self.store, self.b1));
        let pre = g.affine(feats, w1, b1);
        let hidden = g.tanh(pre);
        let (wc, bc) = (g.param(&self.store, self.w_cls), g.param(&self.store, self.b_cls));
        let logits = g.affine(hidden, wc, bc);
        let log_probs = g.log_softmax_rows(logits);
        let (wr, br) = (g.param(&self.store, self.w_reg), g.param(&self.store, self.b_reg));
        let offsets = g.affine(hidden, wr, br);
        FragVars { log_probs, offsets }
    }

    /// Softmax class probabilities of one feature vector.
    pub fn classify_window(&self, features: &[f64; NUM_FEATURES]) -> [f64; NUM_SECTIONS] {
        let (probs, _) = self.predict(&Tensor::from_vec(1, NUM_FEATURES, features.to_vec()));
        probs[0]
    }

    /// Class probabilities and offsets for a batch of feature rows.
    pub fn predict(&self, feats: &Tensor) -> (Vec<[f64; NUM_SECTIONS]>, Vec<[f64; 2]>) {
        let mut g = Graph::new();
        let x = g.input(feats.clone());
        let vars = self.forward(&mut g, x);
        let lp = g.value(vars.log_probs);
        let off = g.value(vars.offsets);
        let probs = (0..feats.rows)
            .map(|r| {
                let mut p = [0.0; NUM_SECTIONS];
                p.iter_mut().zip(lp.row(r)).for_each(|(a, b)| *a = b.exp());
                p
            })
            .collect();
        let offsets = (0..feats.rows).map(|r| [off.get(r, 0), off.get(r, 1)]).collect();
        (probs, offsets)
    }
}

impl WindowScorer for FragModel {
    fn class_probs(&self, bars: &[EventBar], start: usize, size: usize) -> [f64; NUM_SECTIONS] {
        self.classify_window(&window_features(bars, start, size))
    }

    fn max_window_bars(&self) -> usize {
        self.config.max_window_bars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragLossTerms {
    pub cls: f64,
    pub reg: f64,
    pub ssim: f64,
    pub total: f64,
}

/// Training view of one annotated piece.
#[derive(Debug, Clone)]
pub struct FragPiece {
    pub bars: Vec<EventBar>,
    pub sections: Vec<SectionAnnotation>,
}

impl FragPiece {
    pub fn new(bars: Vec<EventBar>, sections: Vec<SectionAnnotation>) -> Result<Self> {
        validate_annotations(&sections)?;
        Ok(FragPiece { bars, sections })
    }

    /// `(grid onset, pitch)` of every note.
    pub fn notes(&self) -> Vec<(u32, u8)> {
        self.bars
            .iter()
            .enumerate()
            .flat_map(|(b, bar)| bar.notes.iter().map(move |n| (b as u32 * STEPS_PER_BAR + n.position as u32, n.pitch)))
            .collect()
    }
}

/// Per-window supervision derived from the max-IoU annotation.
#[derive(Debug, Clone)]
struct WindowTarget {
    class_target: [f64; NUM_SECTIONS],
    matched: Option<Matched>,
}

#[derive(Debug, Clone)]
struct Matched {
    offset_target: [f64; 2],
    gt: SectionAnnotation,
}

fn window_target(start: f64, end: f64, gt: &[SectionAnnotation]) -> WindowTarget {
    let spb = STEPS_PER_BAR as f64;
    let mut best: Option<(f64, &SectionAnnotation)> = None;
    for s in gt {
        let inter = (end.min(s.end as f64) - start.max(s.start as f64)).max(0.0);
        let union = (end - start) + s.len() as f64 - inter;
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        if iou > 0.0 && best.is_none_or(|(b, _)| iou > b) {
            best = Some((iou, s));
        }
    }
    let uniform = 1.0 / NUM_SECTIONS as f64;
    match best {
        None => WindowTarget { class_target: [uniform; NUM_SECTIONS], matched: None },
        Some((_, s)) => {
            let inter = (end.min(s.end as f64) - start.max(s.start as f64)).max(0.0);
            let purity = inter / (end - start);
            let mut t = [(1.0 - purity) * uniform; NUM_SECTIONS];
            t[s.label as usize] += purity;
            let (c, size) = ((start + end) / 2.0, end - start);
            let (gc, gsize) = ((s.start + s.end) as f64 / 2.0, s.len() as f64);
            WindowTarget { class_target: t, matched: Some(Matched { offset_target: [(gc - c) / spb, (gsize - size) / spb], gt: *s }) }
        }
    }
}

/// Given windows with predicted log-probabilities and offsets, record the
/// hybrid loss. Returns `(cls, reg, ssim, total)` scalar nodes.
fn hybrid_graph(
    g: &mut Graph,
    log_probs: Var,
    offsets: Var,
    windows: &[(f64, f64)],
    gt: &[SectionAnnotation],
    notes: &[(u32, u8)],
) -> Result<[Var; 4]> {
    let m = windows.len();
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    let spb = STEPS_PER_BAR as f64;
    let targets: Vec<WindowTarget> = windows.iter().map(|&(s, e)| window_target(s, e, gt)).collect();

    let cls_t = Tensor::from_vec(m, NUM_SECTIONS, targets.iter().flat_map(|t| t.class_target).collect());
    let cls_t = g.input(cls_t);
    let weighted = g.mul(log_probs, cls_t);
    let cls_sum = g.sum(weighted);
    let cls = g.scale(cls_sum, -1.0 / m as f64);

    let mut reg_t = Tensor::zeros(m, 2);
    let mut mask = Tensor::zeros(m, 2);
    for (i, t) in targets.iter().enumerate() {
        if let Some(mt) = &t.matched {
            reg_t.row_mut(i).copy_from_slice(&mt.offset_target);
            mask.row_mut(i).copy_from_slice(&[1.0, 1.0]);
        }
    }
    let reg_t = g.input(reg_t);
    let mask = g.input(mask);
    let diff = g.sub(offsets, reg_t);
    let diff = g.mul(diff, mask);
    let sl = g.smooth_l1(diff);
    let reg_sum = g.sum(sl);
    let reg = g.scale(reg_sum, 1.0 / m as f64);

    let mut ssim_terms = Vec::new();
    for (i, (t, &(ws, we))) in targets.iter().zip(windows).enumerate() {
        let Some(mt) = &t.matched else { continue };
        let row = g.gather_rows(offsets, &[i]);
        let dc = g.slice_cols(row, 0, 1);
        let ds = g.slice_cols(row, 1, 1);
        // refined extent: center + dc*spb, size + ds*spb
        let half_size = g.scale(ds, spb / 2.0);
        let shift = g.scale(dc, spb);
        let start_shift = g.sub(shift, half_size);
        let end_shift = g.add(shift, half_size);
        // a fixed scope keeps the loss continuous in the offsets
        let lo = ws.min(mt.gt.start as f64).floor();
        let hi = we.max(mt.gt.end as f64).ceil();
        let scoped: Vec<&(u32, u8)> = notes.iter().filter(|(o, _)| (*o as f64) >= lo && (*o as f64) < hi).collect();
        if scoped.is_empty() {
            continue;
        }
        let x: Vec<f64> = scoped.iter().map(|(o, _)| *o as f64 + 0.5).collect();
        let pitch: Vec<f64> = scoped.iter().map(|(_, p)| *p as f64).collect();
        let s_vals: Vec<f64> = scoped.iter().map(|(o, p)| if *o >= mt.gt.start && *o < mt.gt.end { *p as f64 } else { 0.0 }).collect();
        let x_col = g.input(Tensor::column(x.iter().map(|v| v - ws + 0.5).collect()));
        let neg_start = g.scale(start_shift, -1.0);
        let u = g.add_row(x_col, neg_start);
        let u = g.ramp(u);
        let y_col = g.input(Tensor::column(x.iter().map(|v| we - v + 0.5).collect()));
        let v = g.add_row(y_col, end_shift);
        let v = g.ramp(v);
        let member = g.mul(u, v);
        let pitch_col = g.input(Tensor::column(pitch));
        let cand = g.mul(member, pitch_col);
        let s_col = g.input(Tensor::column(s_vals));
        ssim_terms.push(g.ssim_loss(cand, s_col)?);
    }
    let ssim = if ssim_terms.is_empty() {
        g.constant(1, 1, 0.0)
    } else {
        let parts = g.concat_cols(&ssim_terms);
        let s = g.sum(parts);
        g.scale(s, 1.0 / m as f64)
    };
    let a = g.add(cls, reg);
    let total = g.add(a, ssim);
    Ok([cls, reg, ssim, total])
}

fn terms_of(g: &Graph, vars: [Var; 4]) -> FragLossTerms {
    FragLossTerms {
        cls: g.value(vars[0]).item(),
        reg: g.value(vars[1]).item(),
        ssim: g.value(vars[2]).item(),
        total: g.value(vars[3]).item(),
    }
}

/// Hybrid loss of given predictions against a piece's annotations.
pub fn hybrid_loss(preds: &[CandidateWindow], gt: &[SectionAnnotation], notes: &[(u32, u8)]) -> Result<FragLossTerms> {
    let m = preds.len();
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    let mut g = Graph::new();
    let lp = Tensor::from_vec(m, NUM_SECTIONS, preds.iter().flat_map(|p| p.class_probs.map(|x| x.max(1e-300).ln())).collect());
    let lp = g.input(lp);
    let off = g.input(Tensor::from_vec(m, 2, preds.iter().flat_map(|p| p.offsets).collect()));
    let windows: Vec<(f64, f64)> = preds.iter().map(|p| (p.start(), p.end())).collect();
    let vars = hybrid_graph(&mut g, lp, off, &windows, gt, notes)?;
    Ok(terms_of(&g, vars))
}

/// Training windows for one piece: every annotated section plus every
/// bar-aligned placement up to the model's maximum width.
fn training_windows(piece: &FragPiece, max_bars: usize) -> Vec<(usize, usize)> {
    let n = piece.bars.len();
    let mut out = Vec::new();
    for start in 0..n {
        for size in 1..=max_bars.min(n - start) {
            out.push((start, size));
        }
    }
    for s in &piece.sections {
        let (a, b) = ((s.start / STEPS_PER_BAR) as usize, s.end.div_ceil(STEPS_PER_BAR) as usize);
        if b > a && b <= n && !out.contains(&(a, b - a)) {
            out.push((a, b - a));
        }
    }
    out
}

pub(crate) struct PreparedPiece {
    feats: Tensor,
    windows: Vec<(f64, f64)>,
    notes: Vec<(u32, u8)>,
    sections: Vec<SectionAnnotation>,
}

pub(crate) fn prepare(piece: &FragPiece, max_bars: usize) -> PreparedPiece {
    let placements = training_windows(piece, max_bars);
    let spb = STEPS_PER_BAR as f64;
    let feats = Tensor::from_vec(
        placements.len(),
        NUM_FEATURES,
        placements.iter().flat_map(|&(s, z)| window_features(&piece.bars, s, z)).collect(),
    );
    let windows = placements.iter().map(|&(s, z)| (s as f64 * spb, (s + z) as f64 * spb)).collect();
    PreparedPiece { feats, windows, notes: piece.notes(), sections: piece.sections.clone() }
}

/// Mean hybrid loss over pieces and its parameter gradients.
pub(crate) fn batch_loss(model: &FragModel, batch: &[&PreparedPiece]) -> Result<(FragLossTerms, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut totals = Vec::new();
    let mut sums = FragLossTerms { cls: 0.0, reg: 0.0, ssim: 0.0, total: 0.0 };
    for p in batch {
        let x = g.input(p.feats.clone());
        let vars = model.forward(&mut g, x);
        let t = hybrid_graph(&mut g, vars.log_probs, vars.offsets, &p.windows, &p.sections, &p.notes)?;
        let terms = terms_of(&g, t);
        sums.cls += terms.cls;
        sums.reg += terms.reg;
        sums.ssim += terms.ssim;
        sums.total += terms.total;
        totals.push(t[3]);
    }
    let k = batch.len() as f64;
    let all = g.concat_cols(&totals);
    let s = g.sum(all);
    let loss = g.scale(s, 1.0 / k);
    let grads = g.backward(loss)?.for_params(&g, &model.store);
    let mean = FragLossTerms { cls: sums.cls / k, reg: sums.reg / k, ssim: sums.ssim / k, total: sums.total / k };
    Ok((mean, grads))
}

/// Hybrid loss of the model on a corpus (all training placements).
pub fn corpus_loss(model: &FragModel, corpus: &[FragPiece]) -> Result<(FragLossTerms, Vec<Tensor>)> {
    let prepared: Vec<PreparedPiece> = corpus.iter().map(|p| prepare(p, model.config.max_window_bars)).collect();
    batch_loss(model, &prepared.iter().collect::<Vec<_>>())
}

/// Full-batch gradient descent; returns the loss before every step.
pub fn train_gd(model: &mut FragModel, corpus: &[FragPiece], steps: usize, lr: f64) -> Result<Vec<f64>> {
    let prepared: Vec<PreparedPiece> = corpus.iter().map(|p| prepare(p, model.config.max_window_bars)).collect();
    let refs: Vec<&PreparedPiece> = prepared.iter().collect();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (terms, grads) = batch_loss(model, &refs)?;
        trace.push(terms.total);
        sgd_step(&mut model.store, &grads, lr);
    }
    Ok(trace)
}

/// Adam over shuffled mini-batches of pieces; returns per-epoch mean loss.
pub fn train_fragmenter(corpus: &[FragPiece], config: FragConfig) -> Result<(FragModel, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = FragModel::new(config);
    let prepared: Vec<PreparedPiece> = corpus.iter().map(|p| prepare(p, config.max_window_bars)).collect();
    let mut opt = Adam::new(&model.store, AdamConfig { lr: config.lr, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let batch = 8.min(prepared.len());
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(batch).collect();
        for chunk in &chunks {
            let refs: Vec<&PreparedPiece> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (terms, grads) = batch_loss(&model, &refs)?;
            epoch += terms.total;
            opt.step(&mut model.store, &grads);
        }
        history.push(epoch / chunks.len() as f64);
    }
    Ok((model, history))
}

/// Turn windows into disjoint annotations covering `[0, total_steps)`.
/// Gaps go to the neighbouring window with the higher confidence; adjacent
/// windows with the same label are merged.
pub fn windows_to_annotations(windows: &[CandidateWindow], total_steps: u32) -> Vec<SectionAnnotation> {
    if windows.is_empty() || total_steps == 0 {
        return Vec::new();
    }
    let mut spans: Vec<(u32, u32, u8, f64)> = windows
        .iter()
        .map(|w| {
            let a = w.as_annotation();
            (a.start.min(total_steps), a.end.min(total_steps), a.label, w.confidence())
        })
        .collect();
    spans.sort_by_key(|s| s.0);
    spans[0].0 = 0;
    let last = spans.len() - 1;
    spans[last].1 = total_steps;
    for i in 0..last {
        let (end, next_start) = (spans[i].1, spans[i + 1].0);
        if end < next_start {
            if spans[i].3 >= spans[i + 1].3 {
                spans[i].1 = next_start;
            } else {
                spans[i + 1].0 = end;
            }
        } else if end > next_start {
            spans[i + 1].0 = end;
        }
    }
    let mut out: Vec<SectionAnnotation> = Vec::new();
    for (start, end, label, _) in spans {
        if end <= start {
            continue;
        }
        match out.last_mut() {
            Some(prev) if prev.label == label && prev.end == start => prev.end = end,
            _ => out.push(SectionAnnotation { start, end, label }),
        }
    }
    out
}

/// Segment a bar sequence: search every window count, keep the highest
/// mass (near-ties go to fewer windows), then resolve to annotations.
pub fn fragment_bars(
    model: &impl WindowScorer,
    bars: &[EventBar],
    max_sections: usize,
    strategy: Strategy,
    tol: f64,
) -> Vec<SectionAnnotation> {
    let n = bars.len();
    if n == 0 {
        return Vec::new();
    }
    let mut best: Option<(f64, Vec<CandidateWindow>)> = None;
    for m in 1..=max_sections.min(n) {
        let Ok(ws) = propose_on_bars(model, bars, m, strategy) else { continue };
        let mass = total_mass(&ws);
        if best.as_ref().is_none_or(|(b, _)| mass > b * (1.0 + tol)) {
            best = Some((mass, ws));
        }
    }
    let windows = best.map(|(_, w)| w).unwrap_or_default();
    windows_to_annotations(&windows, n as u32 * STEPS_PER_BAR)
}

pub fn fragment_stream(model: &FragModel, stream: &EventStream) -> Result<Vec<SectionAnnotation>> {
    let bars = stream.bars()?;
    let c = model.config;
    Ok(fragment_bars(model, &bars, c.max_sections, c.strategy, c.mass_tolerance))
}

pub fn fragment(model: &FragModel, q: &QuantizedScore) -> Result<Vec<SectionAnnotation>> {
    let chords = crate::notation::recognize_chords(q);
    let stream = EventStream::encode(Notation::Cp, q, &chords)?;
    fragment_stream(model, &stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragEvalReport {
    pub iou: f64,
    pub uar: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// Compare predicted and reference annotations piece by piece.
pub fn eval_fragmentation(preds: &[Vec<SectionAnnotation>], gt: &[Vec<SectionAnnotation>]) -> Result<FragEvalReport> {
    if preds.len() != gt.len() {
        return Err(Error::LengthMismatch(format!("{} predicted pieces vs {} annotated", preds.len(), gt.len())));
    }
    let mut ious = Vec::new();
    let mut hits = [0usize; NUM_SECTIONS];
    let mut counts = [0usize; NUM_SECTIONS];
    let mut truth = Vec::new();
    let mut guess = Vec::new();
    for (p, t) in preds.iter().zip(gt) {
        for s in t {
            counts[s.label as usize] += 1;
            let best = p.iter().map(|q| (q.iou(s), q)).fold(None::<(f64, &SectionAnnotation)>, |acc, (v, q)| match acc {
                Some((b, _)) if b >= v => acc,
                _ => Some((v, q)),
            });
            match best {
                Some((v, q)) if v > 0.0 => {
                    ious.push(v);
                    if q.label == s.label {
                        hits[s.label as usize] += 1;
                    }
                    truth.extend([s.start as f64, s.end as f64]);
                    guess.extend([q.start as f64, q.end as f64]);
                }
                _ => ious.push(0.0),
            }
        }
    }
    if ious.is_empty() {
        return Err(Error::EmptyInput);
    }
    let iou = ious.iter().sum::<f64>() / ious.len() as f64;
    let present: Vec<usize> = (0..NUM_SECTIONS).filter(|&k| counts[k] > 0).collect();
    let uar = present.iter().map(|&k| hits[k] as f64 / counts[k] as f64).sum::<f64>() / present.len() as f64;
    let (rmse, r2) = if truth.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let n = truth.len() as f64;
        let ss_res: f64 = truth.iter().zip(&guess).map(|(a, b)| (a - b) * (a - b)).sum();
        let mean = truth.iter().sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|a| (a - mean) * (a - mean)).sum();
        let r2 = if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        };
        ((ss_res / n).sqrt(), r2)
    };
    Ok(FragEvalReport { iou, uar, rmse, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notation::EventNote;

    fn bars_with(n: usize) -> Vec<EventBar> {
        (0..n)
            .map(|b| EventBar { chord: 0, notes: vec![EventNote { position: 0, pitch: 60 + (b % 5) as u8, duration: 4, velocity: 90 }] })
            .collect()
    }

    struct Flat;

    impl WindowScorer for Flat {
        fn class_probs(&self, _: &[EventBar], _: usize, _: usize) -> [f64; NUM_SECTIONS] {
            [0.1; NUM_SECTIONS]
        }
        fn max_window_bars(&self) -> usize {
            16
        }
    }

    /// Confident only on windows inside [0,4) or [4,8).
    struct Halves;

    impl WindowScorer for Halves {
        fn class_probs(&self, _: &[EventBar], start: usize, size: usize) -> [f64; NUM_SECTIONS] {
            let inside = start + size <= 4 || start >= 4;
            let conf = if inside { 0.9 } else { 0.2 };
            let mut p = [(1.0 - conf) / 9.0; NUM_SECTIONS];
            p[if start < 4 { 0 } else { 1 }] = conf;
            p
        }
        fn max_window_bars(&self) -> usize {
            8
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let m = FragModel::zeroed(FragConfig::default());
        let p = m.classify_window(&[0.3; NUM_FEATURES]);
        assert!(p.iter().all(|&x| (x - 0.1).abs() < 1e-15));
    }

    #[test]
    fn flat_scorer_covers_the_whole_piece() {
        let ws = propose_on_bars(&Flat, &bars_with(4), 1, Strategy::Global).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!((ws[0].start(), ws[0].end()), (0.0, 64.0));
    }

    #[test]
    fn halves_oracle_splits_in_the_middle() {
        for strategy in [Strategy::Global, Strategy::L2r] {
            let ws = propose_on_bars(&Halves, &bars_with(8), 2, strategy).unwrap();
            let centers: Vec<f64> = ws.iter().map(|w| w.center / 16.0).collect();
            assert_eq!(centers, vec![2.0, 6.0]);
            assert!(ws.iter().all(|w| w.size_bars == 4));
            assert!(windows_non_overlapping(&ws));
        }
    }

    #[test]
    fn too_many_windows_is_infeasible() {
        let err = propose_on_bars(&Flat, &bars_with(3), 4, Strategy::Global).unwrap_err();
        assert!(matches!(err, Error::InfeasibleM { m: 4, bars: 3 }));
    }

    #[test]
    fn ssim_reference_value() {
        let v = ssim_loss(&[60.0; 4], &[72.0; 4]).unwrap();
        assert!((v - (1.0 - 8640.0001 / 8784.0001)).abs() < 1e-12);
        assert_eq!(ssim_loss(&[], &[]).unwrap_err().code(), "EmptyScope");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = vec![SectionAnnotation { start: 0, end: 32, label: 3 }];
        let mut probs = [0.0; NUM_SECTIONS];
        probs[3] = 1.0;
        let w = CandidateWindow::from_bars(0, 2, probs);
        let notes = vec![(0, 60), (5, 64), (17, 67), (31, 72)];
        let t = hybrid_loss(&[w], &gt, &notes).unwrap();
        assert!(t.cls.abs() < 1e-12 && t.reg == 0.0 && t.ssim.abs() < 1e-12, "{t:?}");
    }

    #[test]
    fn annotations_cover_and_merge() {
        let mut p = [0.0; NUM_SECTIONS];
        p[2] = 0.9;
        let mut q = [0.0; NUM_SECTIONS];
        q[2] = 0.6;
        let ws = vec![CandidateWindow::from_bars(1, 2, p), CandidateWindow::from_bars(4, 2, q)];
        let a = windows_to_annotations(&ws, 7 * 16);
        assert_eq!(a, vec![SectionAnnotation { start: 0, end: 112, label: 2 }]);
    }

    #[test]
    fn eval_identity_and_shift() {
        let gt = vec![vec![SectionAnnotation { start: 0, end: 64, label: 0 }, SectionAnnotation { start: 64, end: 128, label: 1 }]];
        let r = eval_fragmentation(&gt, &gt).unwrap();
        assert_eq!((r.iou, r.uar, r.rmse, r.r2), (1.0, 1.0, 0.0, 1.0));
        let shifted: Vec<Vec<SectionAnnotation>> =
            gt.iter().map(|p| p.iter().map(|s| SectionAnnotation { start: s.start + 16, end: s.end + 16, ..*s }).collect()).collect();
        let r = eval_fragmentation(&shifted, &gt).unwrap();
        assert!((r.rmse - 16.0).abs() < 1e-12);
        let disjoint = vec![vec![SectionAnnotation { start: 200, end: 210, label: 0 }]];
        assert_eq!(eval_fragmentation(&disjoint, &gt).unwrap().iou, 0.0);
    }
}
