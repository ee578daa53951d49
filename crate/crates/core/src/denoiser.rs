//! Three-branch linear-attention denoiser.
//!
//! Each branch (note, chord, section) embeds its noisy latent, adds the step
//! and conditioning embeddings and runs a stack of time-mix blocks. The note
//! stream is gated by the other two, mixed with them in a shared channel-mix
//! block, and categorical heads predict the clean symbols. Noise predictions
//! follow from the expected clean latent (or come from direct linear heads
//! under [`Parameterization::Epsilon`]).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Segments, Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::embedding::{FrozenTables, CHORD_VOCAB, NUM_PITCHES};
use crate::error::{Error, Result};
use crate::notation::{Triplet, NUM_SECTIONS};

pub const BRANCHES: [&str; 3] = ["note", "chord", "section"];
const HEAD_SIZES: [usize; 3] = [NUM_PITCHES, CHORD_VOCAB, NUM_SECTIONS];
pub const MAX_BAR_OFFSET: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Noise derived from the softmax-expected clean latent.
    #[default]
    Categorical,
    /// Noise predicted directly by a linear head per branch.
    Epsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub layers: usize,
    pub parameterization: Parameterization,
    /// Weight of the auxiliary cross-entropy on the symbol heads.
    pub aux_weight: f64,
    /// Probability of dropping the chord/section conditioning per piece.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { dim: 64, layers: 2, parameterization: Parameterization::Categorical, aux_weight: 1.0, cond_dropout: 0.1, seed: 3 }
    }
}

/// Conditioning of one note position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondRow {
    pub chord: u8,
    pub section: u8,
    /// Step within the bar (0..16).
    pub onset: u8,
    /// Bars since the start of the enclosing section (capped).
    pub bar_offset: u8,
}

/// Map from note positions to rows of the chord and section streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub chord_rows: Vec<usize>,
    pub section_rows: Vec<usize>,
}

impl Alignment {
    pub fn identity(n: usize) -> Self {
        Alignment { chord_rows: (0..n).collect(), section_rows: (0..n).collect() }
    }

    fn is_identity(rows: &[usize], n: usize) -> bool {
        rows.len() == n && rows.iter().enumerate().all(|(i, &r)| i == r)
    }
}

/// Fuse the note stream with sigmoid gates from the chord and section streams.
pub fn semantic_activation(g: &mut Graph, o_n: Var, o_c: Var, o_s: Var, align: Option<&Alignment>) -> Result<Var> {
    let n = g.value(o_n).rows;
    let (c, s) = match align {
        None => {
            if g.value(o_c).rows != n || g.value(o_s).rows != n {
                return Err(Error::AlignmentMissing(format!(
                    "{} note rows vs {} chord and {} section rows",
                    n,
                    g.value(o_c).rows,
                    g.value(o_s).rows
                )));
            }
            (o_c, o_s)
        }
        Some(a) => {
            let (cr, sr) = (g.value(o_c).rows, g.value(o_s).rows);
            if a.chord_rows.len() != n
                || a.section_rows.len() != n
                || a.chord_rows.iter().any(|&r| r >= cr)
                || a.section_rows.iter().any(|&r| r >= sr)
            {
                return Err(Error::AlignmentMissing("alignment does not cover the note stream".into()));
            }
            let c = if Alignment::is_identity(&a.chord_rows, cr) { o_c } else { g.gather_rows(o_c, &a.chord_rows) };
            let s = if Alignment::is_identity(&a.section_rows, sr) { o_s } else { g.gather_rows(o_s, &a.section_rows) };
            (c, s)
        }
    };
    let gc = g.sigmoid(c);
    let gs = g.sigmoid(s);
    let fused = g.mul(o_n, gc);
    Ok(g.mul(fused, gs))
}

#[derive(Debug, Clone, Copy)]
pub struct TimeMixIds {
    pub mu_r: ParamId,
    pub mu_k: ParamId,
    pub mu_v: ParamId,
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub decay: ParamId,
}

impl TimeMixIds {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let half = |store: &mut ParamStore, name: &str| store.add(format!("{prefix}.{name}"), Tensor::filled(1, d, 0.5));
        let mu_r = half(store, "mu_r");
        let mu_k = half(store, "mu_k");
        let mu_v = half(store, "mu_v");
        let w_r = store.add(format!("{prefix}.w_r"), Tensor::randn(d, d, s, rng));
        let w_k = store.add(format!("{prefix}.w_k"), Tensor::randn(d, d, s, rng));
        let w_v = store.add(format!("{prefix}.w_v"), Tensor::randn(d, d, s, rng));
        let w_o = store.add(format!("{prefix}.w_o"), Tensor::randn(d, d, s, rng));
        // per-channel decay rates spread between fast and slow
        let decay = Tensor::row_vector((0..d).map(|i| -3.0 + 4.0 * i as f64 / d.max(2) as f64).collect());
        let decay = store.add(format!("{prefix}.decay"), decay);
        TimeMixIds { mu_r, mu_k, mu_v, w_r, w_k, w_v, w_o, decay }
    }
}

fn shift_mix(g: &mut Graph, x: Var, shifted: Var, mu: Var) -> Var {
    // shifted + (x - shifted) * mu
    let diff = g.sub(x, shifted);
    let scaled = g.mul_row(diff, mu);
    g.add(shifted, scaled)
}

/// Token shift, projections, causal WKV, receptance gate, output projection
/// and residual.
pub fn time_mix_forward(g: &mut Graph, store: &ParamStore, ids: &TimeMixIds, x: Var, segments: &Segments) -> Result<Var> {
    let shifted = g.token_shift(x, segments);
    let p = |g: &mut Graph, id| g.param(store, id);
    let (mu_r, mu_k, mu_v) = (p(g, ids.mu_r), p(g, ids.mu_k), p(g, ids.mu_v));
    let xr = shift_mix(g, x, shifted, mu_r);
    let xk = shift_mix(g, x, shifted, mu_k);
    let xv = shift_mix(g, x, shifted, mu_v);
    let (w_r, w_k, w_v, w_o) = (p(g, ids.w_r), p(g, ids.w_k), p(g, ids.w_v), p(g, ids.w_o));
    let r = g.matmul(xr, w_r);
    let k = g.matmul(xk, w_k);
    let v = g.matmul(xv, w_v);
    let dp = p(g, ids.decay);
    let rate = g.exp(dp);
    let decay = g.scale(rate, -1.0);
    let att = g.wkv(decay, k, v, segments)?;
    let gate = g.sigmoid(r);
    let gated = g.mul(gate, att);
    let out = g.matmul(gated, w_o);
    Ok(g.add(x, out))
}

#[derive(Debug, Clone)]
pub struct ChannelMixIds {
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_u: ParamId,
    /// One value map per input stream.
    pub w_v: Vec<ParamId>,
}

impl ChannelMixIds {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, streams: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let w_r = store.add(format!("{prefix}.w_r"), Tensor::randn(d, d, s, rng));
        let w_k = store.add(format!("{prefix}.w_k"), Tensor::randn(d, d, s, rng));
        let w_u = store.add(format!("{prefix}.w_u"), Tensor::randn(d, d, s, rng));
        let w_v = (0..streams).map(|i| store.add(format!("{prefix}.w_v{i}"), Tensor::randn(d, d, s, rng))).collect();
        ChannelMixIds { w_r, w_k, w_u, w_v }
    }
}

/// `streams[0] + sigmoid(streams[0] W_r) * sum_i (gelu(s_i W_k) * (s_i W_u)) W_v[i]`.
pub fn channel_mix_forward(g: &mut Graph, store: &ParamStore, ids: &ChannelMixIds, streams: &[Var]) -> Result<Var> {
    if streams.len() != ids.w_v.len() || streams.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} streams for {} value maps", streams.len(), ids.w_v.len())));
    }
    let (w_r, w_k, w_u) = (g.param(store, ids.w_r), g.param(store, ids.w_k), g.param(store, ids.w_u));
    let mut total: Option<Var> = None;
    for (s, &wv) in streams.iter().zip(&ids.w_v) {
        let k = g.matmul(*s, w_k);
        let act = g.gelu(k);
        let u = g.matmul(*s, w_u);
        let h = g.mul(act, u);
        let w_v = g.param(store, wv);
        let v = g.matmul(h, w_v);
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v),
        });
    }
    let r = g.matmul(streams[0], w_r);
    let gate = g.sigmoid(r);
    let upd = g.mul(gate, total.expect("at least one stream"));
    Ok(g.add(streams[0], upd))
}

#[derive(Debug, Clone)]
struct BranchIds {
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<TimeMixIds>,
    head_w: ParamId,
    head_b: ParamId,
    eps_w: ParamId,
    eps_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    branches: Vec<BranchIds>,
    chord_emb: ParamId,
    section_emb: ParamId,
    onset_emb: ParamId,
    offset_emb: ParamId,
    step_emb: ParamId,
    mixers: Vec<ChannelMixIds>,
    log_temp: ParamId,
}

/// Sinusoidal table of `steps + 1` rows.
pub fn sinusoidal_table(steps: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(steps + 1, d);
    for s in 0..=steps {
        for i in 0..d / 2 {
            let freq = (10_000f64).powf(-(2.0 * i as f64) / d as f64);
            t.set(s, 2 * i, (s as f64 * freq).sin());
            t.set(s, 2 * i + 1, (s as f64 * freq).cos());
        }
    }
    t
}

/// One batch of sequences to denoise.
#[derive(Debug, Clone)]
pub struct DenoiseInput {
    pub segments: Segments,
    pub cond: Vec<CondRow>,
    /// Diffusion step of each segment.
    pub steps: Vec<usize>,
    /// Segments whose chord/section conditioning is dropped.
    pub null_cond: Vec<bool>,
}

impl DenoiseInput {
    pub fn new(segments: Segments, cond: Vec<CondRow>, steps: Vec<usize>) -> Result<Self> {
        if segments.total() != cond.len() || steps.len() != segments.0.len() {
            return Err(Error::ShapeMismatch("conditioning does not match the segment layout".into()));
        }
        let n = steps.len();
        Ok(DenoiseInput { segments, cond, steps, null_cond: vec![false; n] })
    }

    pub fn with_null(mut self, null: bool) -> Self {
        self.null_cond = vec![null; self.steps.len()];
        self
    }

    fn row_steps(&self) -> Vec<usize> {
        self.segments.spans().zip(&self.steps).flat_map(|((_, len), &t)| std::iter::repeat_n(t, len)).collect()
    }

    fn row_null(&self) -> Vec<bool> {
        self.segments.spans().zip(&self.null_cond).flat_map(|((_, len), &z)| std::iter::repeat_n(z, len)).collect()
    }
}

/// Nodes produced by one forward pass.
pub struct DenoiseOutput {
    /// Noise prediction per branch (N×D each).
    pub eps: [Var; 3],
    /// Head logits after temperature scaling (note, chord, section).
    pub logits: [Var; 3],
    pub activations: Vec<(String, Var)>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule) -> Self {
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let s = 1.0 / (d as f64).sqrt();
        let mut branches = Vec::new();
        for (b, name) in BRANCHES.iter().enumerate() {
            let in_w = store.add(format!("den.{name}.in_w"), Tensor::randn(d, d, s, &mut rng));
            let in_b = store.add(format!("den.{name}.in_b"), Tensor::zeros(1, d));
            let blocks = (0..config.layers).map(|l| TimeMixIds::register(&mut store, &format!("den.{name}.tm{l}"), d, &mut rng)).collect();
            let head_w = store.add(format!("den.{name}.head_w"), Tensor::randn(d, HEAD_SIZES[b], 0.1 * s, &mut rng));
            let head_b = store.add(format!("den.{name}.head_b"), Tensor::zeros(1, HEAD_SIZES[b]));
            let eps_w = store.add(format!("den.{name}.eps_w"), Tensor::zeros(d, d));
            let eps_b = store.add(format!("den.{name}.eps_b"), Tensor::zeros(1, d));
            branches.push(BranchIds { in_w, in_b, blocks, head_w, head_b, eps_w, eps_b });
        }
        let chord_emb = store.add("den.cond.chord", Tensor::randn(CHORD_VOCAB, d, 0.5, &mut rng));
        let section_emb = store.add("den.cond.section", Tensor::randn(NUM_SECTIONS, d, 0.5, &mut rng));
        let onset_emb = store.add("den.cond.onset", Tensor::randn(16, d, 0.5, &mut rng));
        let offset_emb = store.add("den.cond.offset", Tensor::randn(MAX_BAR_OFFSET, d, 0.5, &mut rng));
        let step_emb = store.add("den.step", sinusoidal_table(schedule.steps, d));
        let mut mixers = vec![ChannelMixIds::register(&mut store, "den.cm0", d, 3, &mut rng)];
        for l in 1..config.layers.max(1) {
            mixers.push(ChannelMixIds::register(&mut store, &format!("den.cm{l}"), d, 1, &mut rng));
        }
        let log_temp = store.add("den.log_temp", Tensor::scalar(0.0));
        Denoiser { config, store, schedule, branches, chord_emb, section_emb, onset_emb, offset_emb, step_emb, mixers, log_temp }
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: DenoiserConfig, schedule: NoiseSchedule) -> Self {
        let mut m = Self::new(config, schedule);
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    pub fn from_store(config: DenoiserConfig, schedule: NoiseSchedule, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(config, schedule);
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

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn log_temp(&self) -> f64 {
        self.store.get(self.log_temp).item()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn conditioning(&self, g: &mut Graph, input: &DenoiseInput) -> Var {
        let d = self.dim();
        let rows = &input.cond;
        let chord_ids: Vec<usize> = rows.iter().map(|c| c.chord as usize).collect();
        let section_ids: Vec<usize> = rows.iter().map(|c| c.section as usize).collect();
        let onset_ids: Vec<usize> = rows.iter().map(|c| c.onset as usize % 16).collect();
        let offset_ids: Vec<usize> = rows.iter().map(|c| (c.bar_offset as usize).min(MAX_BAR_OFFSET - 1)).collect();
        let ct = g.param(&self.store, self.chord_emb);
        let st = g.param(&self.store, self.section_emb);
        let ot = g.param(&self.store, self.onset_emb);
        let ft = g.param(&self.store, self.offset_emb);
        let c = g.gather_rows(ct, &chord_ids);
        let s = g.gather_rows(st, &section_ids);
        let o = g.gather_rows(ot, &onset_ids);
        let f = g.gather_rows(ft, &offset_ids);
        let cs = g.add(c, s);
        let semantic = g.add(cs, f);
        let nulls = input.row_null();
        let semantic = if nulls.iter().any(|&z| z) {
            let mask =
                Tensor::from_vec(rows.len(), d, nulls.iter().flat_map(|&z| std::iter::repeat_n(if z { 0.0 } else { 1.0 }, d)).collect());
            let m = g.input(mask);
            g.mul(semantic, m)
        } else {
            semantic
        };
        g.add(semantic, o)
    }

    /// Record a forward pass on noisy latents `z_t` (N×3D).
    pub fn forward(&self, g: &mut Graph, frozen: &FrozenTables, z_t: Var, input: &DenoiseInput) -> Result<DenoiseOutput> {
        let d = self.dim();
        let zv = g.value(z_t);
        if zv.cols != 3 * d || zv.rows != input.cond.len() {
            return Err(Error::ShapeMismatch(format!("latent {:?} for {} positions of width {}", zv.shape(), input.cond.len(), 3 * d)));
        }
        if frozen.dim != d {
            return Err(Error::ShapeMismatch(format!("encoder width {} vs denoiser width {d}", frozen.dim)));
        }
        if input.steps.iter().any(|&t| t == 0 || t > self.schedule.steps) {
            let t = *input.steps.iter().find(|&&t| t == 0 || t > self.schedule.steps).unwrap();
            return Err(Error::StepOutOfRange { t, max: self.schedule.steps });
        }
        let mut acts = Vec::new();
        let segs = &input.segments;
        let row_steps = input.row_steps();
        let step_table = g.param(&self.store, self.step_emb);
        let step = g.gather_rows(step_table, &row_steps);
        let cond = self.conditioning(g, input);
        let ctx = g.add(step, cond);
        let mut outs = Vec::with_capacity(3);
        for (b, ids) in self.branches.iter().enumerate() {
            let zb = g.slice_cols(z_t, b * d, d);
            let (w, bias) = (g.param(&self.store, ids.in_w), g.param(&self.store, ids.in_b));
            let h = g.affine(zb, w, bias);
            let mut h = g.add(h, ctx);
            for (l, blk) in ids.blocks.iter().enumerate() {
                h = time_mix_forward(g, &self.store, blk, h, segs)?;
                acts.push((format!("{}.tm{l}", BRANCHES[b]), h));
            }
            outs.push(h);
        }
        let fused = semantic_activation(g, outs[0], outs[1], outs[2], None)?;
        acts.push(("fused".to_string(), fused));
        let mut h = channel_mix_forward(g, &self.store, &self.mixers[0], &[fused, outs[1], outs[2]])?;
        acts.push(("cm0".to_string(), h));
        for (l, m) in self.mixers.iter().enumerate().skip(1) {
            h = channel_mix_forward(g, &self.store, m, &[h])?;
            acts.push((format!("cm{l}"), h));
        }
        let streams = [h, outs[1], outs[2]];
        let lt = g.param(&self.store, self.log_temp);
        let neg = g.scale(lt, -1.0);
        let inv_temp = g.exp(neg);
        let mut logits = Vec::with_capacity(3);
        for (b, ids) in self.branches.iter().enumerate() {
            let (w, bias) = (g.param(&self.store, ids.head_w), g.param(&self.store, ids.head_b));
            let raw = g.affine(streams[b], w, bias);
            logits.push(g.mul_scalar(raw, inv_temp));
        }
        let eps: Vec<Var> = match self.config.parameterization {
            Parameterization::Epsilon => self
                .branches
                .iter()
                .zip(streams)
                .map(|(ids, s)| {
                    let (w, bias) = (g.param(&self.store, ids.eps_w), g.param(&self.store, ids.eps_b));
                    g.affine(s, w, bias)
                })
                .collect(),
            Parameterization::Categorical => {
                let probs: Vec<Var> = logits.iter().map(|&l| g.softmax_rows(l)).collect();
                let z0 = frozen.expected_latents(g, probs[0], probs[1], probs[2]);
                let n = row_steps.len();
                let signal =
                    Tensor::from_vec(n, d, row_steps.iter().flat_map(|&t| std::iter::repeat_n(self.schedule.signal_coef(t), d)).collect());
                let inv_noise = Tensor::from_vec(
                    n,
                    d,
                    row_steps.iter().flat_map(|&t| std::iter::repeat_n(1.0 / self.schedule.noise_coef(t), d)).collect(),
                );
                let a = g.input(signal);
                let binv = g.input(inv_noise);
                (0..3)
                    .map(|b| {
                        let zb = g.slice_cols(z_t, b * d, d);
                        let sig = g.mul(z0[b], a);
                        let resid = g.sub(zb, sig);
                        g.mul(resid, binv)
                    })
                    .collect()
            }
        };
        for (b, &e) in eps.iter().enumerate() {
            acts.push((format!("eps.{}", BRANCHES[b]), e));
        }
        Ok(DenoiseOutput { eps: [eps[0], eps[1], eps[2]], logits: [logits[0], logits[1], logits[2]], activations: acts })
    }

    /// Noise prediction as plain values.
    pub fn predict_noise(&self, frozen: &FrozenTables, z_t: &Tensor, input: &DenoiseInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.input(z_t.clone());
        let out = self.forward(&mut g, frozen, z, input)?;
        let cat = g.concat_cols(&out.eps);
        Ok(g.value(cat).clone())
    }
}

/// Mean squared error between a prediction and target noise; the two must
/// have the same shape.
pub fn denoise_loss(pred: &Tensor, eps: &Tensor) -> Result<f64> {
    if pred.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", pred.shape(), eps.shape())));
    }
    Ok(pred.data.iter().zip(&eps.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Loss nodes of one recorded forward pass.
pub struct LossNodes {
    /// Per-branch noise regression.
    pub mse: [Var; 3],
    /// Per-branch head cross-entropy.
    pub ce: [Var; 3],
    /// Mean noise regression over all branches.
    pub regression: Var,
    /// `mse + aux_weight * ce` per branch.
    pub branch_total: [Var; 3],
}

pub fn loss_nodes(g: &mut Graph, out: &DenoiseOutput, eps: &Tensor, targets: &[Triplet], dim: usize, aux_weight: f64) -> Result<LossNodes> {
    if eps.cols != 3 * dim || eps.rows != targets.len() {
        return Err(Error::ShapeMismatch(format!("noise {:?} for {} targets", eps.shape(), targets.len())));
    }
    let mut mse = Vec::new();
    let mut ce = Vec::new();
    let mut totals = Vec::new();
    for b in 0..3 {
        let truth = g.input(crate::diffusion::slice_block(eps, b, dim));
        let m = g.mse(out.eps[b], truth);
        let ids: Vec<usize> = targets
            .iter()
            .map(|t| match b {
                0 => t.note as usize,
                1 => t.chord as usize,
                _ => t.section as usize,
            })
            .collect();
        let lp = g.log_softmax_rows(out.logits[b]);
        let picked = g.pick(lp, &ids);
        let nll = g.mean(picked);
        let c = g.scale(nll, -1.0);
        let weighted = g.scale(c, aux_weight);
        totals.push(g.add(m, weighted));
        mse.push(m);
        ce.push(c);
    }
    let s01 = g.add(mse[0], mse[1]);
    let s = g.add(s01, mse[2]);
    let regression = g.scale(s, 1.0 / 3.0);
    Ok(LossNodes { mse: [mse[0], mse[1], mse[2]], ce: [ce[0], ce[1], ce[2]], regression, branch_total: [totals[0], totals[1], totals[2]] })
}

/// Relaxed or hard Gumbel-max samples for each logit row.
pub fn gumbel_decode(logits: &Tensor, log_temp: f64, rng: &mut impl Rng, hard: bool) -> (Vec<usize>, Tensor) {
    let temp = log_temp.exp();
    let mut soft = Tensor::zeros(logits.rows, logits.cols);
    let mut picks = Vec::with_capacity(logits.rows);
    for r in 0..logits.rows {
        let perturbed: Vec<f64> = logits
            .row(r)
            .iter()
            .map(|&l| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                l - (-u.ln()).ln()
            })
            .collect();
        let best = perturbed.iter().enumerate().fold(0, |b, (i, &v)| if v > perturbed[b] { i } else { b });
        picks.push(best);
        if hard {
            soft.set(r, best, 1.0);
        } else {
            let scaled: Vec<f64> = perturbed.iter().map(|v| v / temp).collect();
            soft.row_mut(r).copy_from_slice(&crate::autodiff::softmax(&scaled));
        }
    }
    (picks, soft)
}
