//! Pitch lattice embedding and the note/chord/section encoders, with
//! contrastive pre-training of chord-vs-notes and section-vs-chords pairs.
//!
//! Note embeddings are `pc_table[p % 12] + (p / 12) · octave`, so interval
//! and octave relations hold exactly for any parameter values.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::notation::{AlignedTriplet, Triplet, NUM_CHORDS, NUM_SECTIONS};
use crate::optim::{Adam, AdamConfig};

pub const NUM_PITCHES: usize = 128;
/// Chord vocabulary including the no-chord symbol.
pub const CHORD_VOCAB: usize = NUM_CHORDS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JspConfig {
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub chord_batch: usize,
    pub section_batch: usize,
    pub seed: u64,
    /// Whether the chord encoder sees the note embedding.
    pub chord_uses_note: bool,
    pub init_log_scale: f64,
}

impl Default for JspConfig {
    fn default() -> Self {
        JspConfig {
            dim: 64,
            steps: 200,
            lr: 1e-2,
            chord_batch: 256,
            section_batch: 32,
            seed: 11,
            chord_uses_note: true,
            init_log_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemanticEncoders {
    pub config: JspConfig,
    pub store: ParamStore,
    pc_table: ParamId,
    octave: ParamId,
    note_to_chord: ParamId,
    chord_table: ParamId,
    chord_bias: ParamId,
    chord_to_section: ParamId,
    section_table: ParamId,
    section_bias: ParamId,
    log_scale_cn: ParamId,
    log_scale_sc: ParamId,
}

/// Frozen copies of the encoder tables, used where encoders are not trained.
#[derive(Debug, Clone)]
pub struct FrozenTables {
    pub dim: usize,
    pub chord_uses_note: bool,
    pub notes: Tensor,
    pub note_to_chord: Tensor,
    pub chords: Tensor,
    pub chord_bias: Tensor,
    pub chord_to_section: Tensor,
    pub sections: Tensor,
    pub section_bias: Tensor,
}

fn octave_column() -> Tensor {
    Tensor::column((0..NUM_PITCHES).map(|p| (p / 12) as f64).collect())
}

fn pitch_classes() -> Vec<usize> {
    (0..NUM_PITCHES).map(|p| p % 12).collect()
}

impl SemanticEncoders {
    pub fn new(config: JspConfig) -> Self {
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let s = 1.0 / (d as f64).sqrt();
        let pc_table = store.add("enc.pc_table", Tensor::randn(12, d, 1.0, &mut rng));
        let octave = store.add("enc.octave", Tensor::randn(1, d, 1.0, &mut rng));
        let note_to_chord = store.add("enc.note_to_chord", Tensor::randn(d, d, s, &mut rng));
        let chord_table = store.add("enc.chord_table", Tensor::randn(CHORD_VOCAB, d, 1.0, &mut rng));
        let chord_bias = store.add("enc.chord_bias", Tensor::zeros(1, d));
        let chord_to_section = store.add("enc.chord_to_section", Tensor::randn(d, d, s, &mut rng));
        let section_table = store.add("enc.section_table", Tensor::randn(NUM_SECTIONS, d, 1.0, &mut rng));
        let section_bias = store.add("enc.section_bias", Tensor::zeros(1, d));
        let log_scale_cn = store.add("enc.log_scale_cn", Tensor::scalar(config.init_log_scale));
        let log_scale_sc = store.add("enc.log_scale_sc", Tensor::scalar(config.init_log_scale));
        SemanticEncoders {
            config,
            store,
            pc_table,
            octave,
            note_to_chord,
            chord_table,
            chord_bias,
            chord_to_section,
            section_table,
            section_bias,
            log_scale_cn,
            log_scale_sc,
        }
    }

    pub fn from_store(config: JspConfig, store: ParamStore) -> Result<Self> {
        let mut e = Self::new(config);
        for id in e.store.ids().collect::<Vec<_>>() {
            let name = e.store.name(id).to_string();
            let src = store.find(&name).ok_or_else(|| Error::InvalidCheckpoint(format!("missing tensor {name}")))?;
            if store.get(src).shape() != e.store.get(id).shape() {
                return Err(Error::InvalidCheckpoint(format!("shape of {name}")));
            }
            *e.store.get_mut(id) = store.get(src).clone();
        }
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn embed_note(&self, pitch: i64) -> Result<Vec<f64>> {
        if !(0..NUM_PITCHES as i64).contains(&pitch) {
            return Err(Error::PitchOutOfRange(pitch));
        }
        let p = pitch as usize;
        let pc = self.store.get(self.pc_table).row(p % 12);
        let u = &self.store.get(self.octave).data;
        let k = (p / 12) as f64;
        Ok(pc.iter().zip(u).map(|(a, b)| a + k * b).collect())
    }

    /// All 128 note embeddings as rows.
    pub fn note_table(&self) -> Tensor {
        let mut t = Tensor::zeros(NUM_PITCHES, self.dim());
        for p in 0..NUM_PITCHES {
            t.row_mut(p).copy_from_slice(&self.embed_note(p as i64).expect("in range"));
        }
        t
    }

    fn note_table_graph(&self, g: &mut Graph) -> Var {
        let pc = g.param(&self.store, self.pc_table);
        let u = g.param(&self.store, self.octave);
        let base = g.gather_rows(pc, &pitch_classes());
        let oct = g.input(octave_column());
        let shift = g.matmul(oct, u);
        g.add(base, shift)
    }

    pub fn frozen(&self) -> FrozenTables {
        FrozenTables {
            dim: self.dim(),
            chord_uses_note: self.config.chord_uses_note,
            notes: self.note_table(),
            note_to_chord: self.store.get(self.note_to_chord).clone(),
            chords: self.store.get(self.chord_table).clone(),
            chord_bias: self.store.get(self.chord_bias).clone(),
            chord_to_section: self.store.get(self.chord_to_section).clone(),
            sections: self.store.get(self.section_table).clone(),
            section_bias: self.store.get(self.section_bias).clone(),
        }
    }

    /// `(z_n, z_c, z_s)` concatenated; length `3 · dim`.
    pub fn encode_triplet(&self, t: Triplet) -> Vec<f64> {
        self.frozen().encode(&[t]).data
    }

    /// Nearest lattice pitch; ties go to the lower pitch.
    pub fn decode_note(&self, z: &[f64]) -> u8 {
        decode_nearest(&self.note_table(), z)
    }

    pub fn scales(&self) -> (f64, f64) {
        (self.store.get(self.log_scale_cn).item().exp(), self.store.get(self.log_scale_sc).item().exp())
    }

    /// CSV dump of the note, chord and section tables.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let f = self.frozen();
        writeln!(out, "table,index,{}", (0..self.dim()).map(|i| format!("d{i}")).collect::<Vec<_>>().join(","))?;
        for (name, t) in [("note", &f.notes), ("chord", &f.chords), ("section", &f.sections)] {
            for r in 0..t.rows {
                let vals: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
                writeln!(out, "{name},{r},{}", vals.join(","))?;
            }
        }
        Ok(())
    }
}

pub fn decode_nearest(table: &Tensor, z: &[f64]) -> u8 {
    let mut best = (f64::INFINITY, 0usize);
    for p in 0..table.rows {
        let d: f64 = table.row(p).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, p);
        }
    }
    best.1 as u8
}

impl FrozenTables {
    /// Latents for a batch of triplets, one row each.
    pub fn encode(&self, triplets: &[Triplet]) -> Tensor {
        let d = self.dim;
        let mut out = Tensor::zeros(triplets.len(), 3 * d);
        for (i, t) in triplets.iter().enumerate() {
            let zn = self.notes.row(t.note as usize);
            let g = self.chords.row(t.chord as usize);
            let mut zc = vec![0.0; d];
            for j in 0..d {
                let mut acc = g[j] + self.chord_bias.data[j];
                if self.chord_uses_note {
                    acc += (0..d).map(|k| zn[k] * self.note_to_chord.get(k, j)).sum::<f64>();
                }
                zc[j] = acc.tanh();
            }
            let h = self.sections.row(t.section as usize);
            let mut zs = vec![0.0; d];
            for j in 0..d {
                let acc = (0..d).map(|k| g[k] * self.chord_to_section.get(k, j)).sum::<f64>() + h[j] + self.section_bias.data[j];
                zs[j] = acc.tanh();
            }
            let row = out.row_mut(i);
            row[..d].copy_from_slice(zn);
            row[d..2 * d].copy_from_slice(&zc);
            row[2 * d..].copy_from_slice(&zs);
        }
        out
    }

    /// Latents of expected symbols under categorical distributions (rows of
    /// `p_note` N×128, `p_chord` N×49, `p_section` N×10). Returns three N×D nodes.
    pub fn expected_latents(&self, g: &mut Graph, p_note: Var, p_chord: Var, p_section: Var) -> [Var; 3] {
        let notes = g.input(self.notes.clone());
        let zn = g.matmul(p_note, notes);
        let chords = g.input(self.chords.clone());
        let gc = g.matmul(p_chord, chords);
        let cb = g.input(self.chord_bias.clone());
        let pre_c = if self.chord_uses_note {
            let w = g.input(self.note_to_chord.clone());
            let proj = g.matmul(zn, w);
            g.add(proj, gc)
        } else {
            gc
        };
        let pre_c = g.add_row(pre_c, cb);
        let zc = g.tanh(pre_c);
        let w_cs = g.input(self.chord_to_section.clone());
        let proj = g.matmul(gc, w_cs);
        let sections = g.input(self.sections.clone());
        let hs = g.matmul(p_section, sections);
        let sb = g.input(self.section_bias.clone());
        let pre_s = g.add(proj, hs);
        let pre_s = g.add_row(pre_s, sb);
        let zs = g.tanh(pre_s);
        [zn, zc, zs]
    }
}

/// One contrastive pair: a bag of left-hand symbols and a right-hand id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPair {
    pub context: Vec<usize>,
    pub target: usize,
}

/// Positive pairs mined from aligned triplets: (notes of a bar, bar chord)
/// and (bar chords of a section run, section label).
#[derive(Debug, Clone, Default)]
pub struct JspPairs {
    pub chord_notes: Vec<ContextPair>,
    pub section_chords: Vec<ContextPair>,
}

pub fn mine_pairs(corpus: &[Vec<AlignedTriplet>]) -> JspPairs {
    let mut pairs = JspPairs::default();
    for piece in corpus {
        let mut by_bar: BTreeMap<usize, (u8, Vec<usize>)> = BTreeMap::new();
        for a in piece {
            by_bar.entry(a.bar).or_insert((a.triplet.chord, Vec::new())).1.push(a.triplet.note as usize);
        }
        for (chord, notes) in by_bar.values() {
            if (*chord as usize) < NUM_CHORDS {
                pairs.chord_notes.push(ContextPair { context: notes.clone(), target: *chord as usize });
            }
        }
        // section runs: consecutive triplets with the same label
        let mut run: Option<(u8, Vec<(usize, u8)>)> = None;
        for a in piece {
            match &mut run {
                Some((label, bars)) if *label == a.triplet.section => {
                    if bars.last().map(|b| b.0) != Some(a.bar) {
                        bars.push((a.bar, a.triplet.chord));
                    }
                }
                _ => {
                    if let Some((label, bars)) = run.take() {
                        pairs
                            .section_chords
                            .push(ContextPair { context: bars.iter().map(|b| b.1 as usize).collect(), target: label as usize });
                    }
                    run = Some((a.triplet.section, vec![(a.bar, a.triplet.chord)]));
                }
            }
        }
        if let Some((label, bars)) = run {
            pairs.section_chords.push(ContextPair { context: bars.iter().map(|b| b.1 as usize).collect(), target: label as usize });
        }
    }
    pairs
}

fn distinct_targets(pairs: &[ContextPair]) -> usize {
    let mut t: Vec<usize> = pairs.iter().map(|p| p.target).collect();
    t.sort_unstable();
    t.dedup();
    t.len()
}

/// Pick at most `max` pairs with pairwise-distinct targets.
fn sample_batch<'a>(pairs: &'a [ContextPair], max: usize, rng: &mut ChaCha8Rng) -> Vec<&'a ContextPair> {
    let mut groups: BTreeMap<usize, Vec<&ContextPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.target).or_default().push(p);
    }
    let mut batch: Vec<&ContextPair> = groups.values().map(|g| *g.choose(rng).expect("non-empty group")).collect();
    batch.shuffle(rng);
    batch.truncate(max);
    batch
}

/// Row-averaging matrix for bags of indices into a table: returns (B×V).
fn bag_matrix(bags: &[&ContextPair], vocab: usize) -> Tensor {
    let mut m = Tensor::zeros(bags.len(), vocab);
    for (i, b) in bags.iter().enumerate() {
        let w = 1.0 / b.context.len() as f64;
        for &c in &b.context {
            m.data[i * vocab + c] += w;
        }
    }
    m
}

/// Symmetric cross-entropy of a B×B logit matrix with matches on the diagonal.
pub fn symmetric_ce_graph(g: &mut Graph, logits: Var) -> Var {
    let b = g.value(logits).rows;
    let diag: Vec<usize> = (0..b).collect();
    let rows = g.log_softmax_rows(logits);
    let pr = g.pick(rows, &diag);
    let t = g.transpose(logits);
    let cols = g.log_softmax_rows(t);
    let pc = g.pick(cols, &diag);
    let both = g.add(pr, pc);
    let s = g.sum(both);
    g.scale(s, -0.5 / b as f64)
}

/// Scalar reference for [`symmetric_ce_graph`] on a similarity matrix.
pub fn symmetric_ce(similarity: &Tensor, scale: f64) -> f64 {
    let b = similarity.rows;
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| scale * similarity.get(i, j)).collect();
        let col: Vec<f64> = (0..b).map(|j| scale * similarity.get(j, i)).collect();
        total += crate::autodiff::log_sum_exp(&row) - row[i];
        total += crate::autodiff::log_sum_exp(&col) - col[i];
    }
    total / (2.0 * b as f64)
}

impl SemanticEncoders {
    /// Contrastive loss of the chord-vs-notes head on one batch.
    pub fn chord_head_loss(&self, g: &mut Graph, batch: &[&ContextPair]) -> Var {
        let notes = self.note_table_graph(g);
        let bags = g.input(bag_matrix(batch, NUM_PITCHES));
        let ctx = g.matmul(bags, notes);
        let w = g.param(&self.store, self.note_to_chord);
        let left = g.matmul(ctx, w);
        let table = g.param(&self.store, self.chord_table);
        let ids: Vec<usize> = batch.iter().map(|p| p.target).collect();
        let right = g.gather_rows(table, &ids);
        let scale = g.param(&self.store, self.log_scale_cn);
        contrastive(g, left, right, scale)
    }

    pub fn section_head_loss(&self, g: &mut Graph, batch: &[&ContextPair]) -> Var {
        let table = g.param(&self.store, self.chord_table);
        let bags = g.input(bag_matrix(batch, CHORD_VOCAB));
        let ctx = g.matmul(bags, table);
        let w = g.param(&self.store, self.chord_to_section);
        let left = g.matmul(ctx, w);
        let sections = g.param(&self.store, self.section_table);
        let ids: Vec<usize> = batch.iter().map(|p| p.target).collect();
        let right = g.gather_rows(sections, &ids);
        let scale = g.param(&self.store, self.log_scale_sc);
        contrastive(g, left, right, scale)
    }
}

fn contrastive(g: &mut Graph, left: Var, right: Var, log_scale: Var) -> Var {
    let l = g.l2_normalize_rows(left);
    let r = g.l2_normalize_rows(right);
    let rt = g.transpose(r);
    let sim = g.matmul(l, rt);
    let s = g.exp(log_scale);
    let logits = g.mul_scalar(sim, s);
    symmetric_ce_graph(g, logits)
}

/// Mean positive- and negative-pair cosine of the chord head over `pairs`.
pub fn chord_head_cosines(enc: &SemanticEncoders, pairs: &[ContextPair]) -> (f64, f64) {
    let refs: Vec<&ContextPair> = pairs.iter().collect();
    let notes = enc.note_table();
    let ctx = bag_matrix(&refs, NUM_PITCHES).matmul(&notes).matmul(enc.store.get(enc.note_to_chord));
    let table = enc.store.get(enc.chord_table);
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0, 0.0, 0);
    let mut targets: Vec<usize> = pairs.iter().map(|p| p.target).collect();
    targets.sort_unstable();
    targets.dedup();
    for (i, p) in pairs.iter().enumerate() {
        for &t in &targets {
            let c = cos(ctx.row(i), table.row(t));
            if t == p.target {
                pos += c;
                np += 1;
            } else {
                neg += c;
                nn += 1;
            }
        }
    }
    (pos / np.max(1) as f64, neg / nn.max(1) as f64)
}

/// Train both contrastive heads with Adam. Returns the encoders and the
/// per-step total loss.
pub fn jsp_pretrain(corpus: &[Vec<AlignedTriplet>], config: JspConfig) -> Result<(SemanticEncoders, Vec<f64>)> {
    let pairs = mine_pairs(corpus);
    if distinct_targets(&pairs.chord_notes) < 2 {
        return Err(Error::InsufficientCorpus(format!(
            "{} distinct chords; contrastive training needs at least 2",
            distinct_targets(&pairs.chord_notes)
        )));
    }
    let use_sections = distinct_targets(&pairs.section_chords) >= 2;
    if !use_sections {
        log::warn!("fewer than two section labels; skipping the section head");
    }
    let mut enc = SemanticEncoders::new(config);
    let mut opt = Adam::new(&enc.store, AdamConfig { lr: config.lr, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x15b);
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut g = Graph::new();
        let cb = sample_batch(&pairs.chord_notes, config.chord_batch, &mut rng);
        let mut loss = enc.chord_head_loss(&mut g, &cb);
        if use_sections {
            let sb = sample_batch(&pairs.section_chords, config.section_batch, &mut rng);
            let sl = enc.section_head_loss(&mut g, &sb);
            loss = g.add(loss, sl);
        }
        trace.push(g.value(loss).item());
        let grads = g.backward(loss)?.for_params(&g, &enc.store);
        opt.step(&mut enc.store, &grads);
    }
    Ok((enc, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_and_octave_relations() {
        let e = SemanticEncoders::new(JspConfig { dim: 8, ..Default::default() });
        let d =
            |a: i64, b: i64| -> Vec<f64> { e.embed_note(a).unwrap().iter().zip(e.embed_note(b).unwrap()).map(|(x, y)| x - y).collect() };
        let norm = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(d(62, 60)) - norm(d(74, 72))).abs() < 1e-12);
        let (a, b) = (d(72, 60), d(84, 72));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(matches!(e.embed_note(128), Err(Error::PitchOutOfRange(128))));
    }

    #[test]
    fn decode_inverts_the_lattice() {
        let e = SemanticEncoders::new(JspConfig { dim: 8, ..Default::default() });
        let t = e.note_table();
        for p in [0u8, 60, 127] {
            assert_eq!(decode_nearest(&t, t.row(p as usize)), p);
        }
    }

    #[test]
    fn identity_similarity_closed_form() {
        for b in [2usize, 5, 9] {
            let mut s = Tensor::zeros(b, b);
            for i in 0..b {
                s.set(i, i, 1.0);
            }
            let tau: f64 = 3.0;
            let expect = (1.0 + (b as f64 - 1.0) * (-tau).exp()).ln();
            assert!((symmetric_ce(&s, tau) - expect).abs() < 1e-12);
            let mut g = Graph::new();
            let l = g.input(s.scaled(tau));
            let v = symmetric_ce_graph(&mut g, l);
            assert!((g.value(v).item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_chord_corpus_is_insufficient() {
        let piece: Vec<AlignedTriplet> =
            (0..4).map(|i| AlignedTriplet { onset: i * 4, bar: 0, triplet: Triplet::new(60, 0, 0).unwrap() }).collect();
        assert!(matches!(jsp_pretrain(&[piece], JspConfig::default()), Err(Error::InsufficientCorpus(_))));
    }
}
