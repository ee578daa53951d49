//! Noise schedules, the forward perturbation of joint latents, the reverse
//! update and the prompted generation loop.
//!
//! By default the forward marginal is `z_t = sqrt(a_t) z_0 + (1 - a_t) eps`
//! with a per-step schedule `a_t`. With `variance_preserving` the cumulative
//! product of `a_t` and a `sqrt(1 - abar_t)` noise scale are used instead.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ALPHA_MIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::ConfigInvalid(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// `alphas[t]` for `t = 0..=steps`, with `alphas[0] = 1`.
    pub alphas: Vec<f64>,
    pub variance_preserving: bool,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::BadT(steps));
    }
    let big_t = steps as f64;
    let alphas = (0..=steps)
        .map(|t| {
            let t = t as f64;
            match kind {
                ScheduleKind::Linear => 1.0 - t * (1.0 - ALPHA_MIN) / big_t,
                ScheduleKind::Cosine => {
                    let c = (t / big_t * std::f64::consts::FRAC_PI_2).cos();
                    c * c * (1.0 - ALPHA_MIN) + ALPHA_MIN
                }
            }
        })
        .collect();
    Ok(NoiseSchedule { kind, steps, alphas, variance_preserving: false })
}

impl NoiseSchedule {
    pub fn with_variance_preserving(mut self, on: bool) -> Self {
        self.variance_preserving = on;
        self
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::StepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    /// Cumulative product of the per-step values up to `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas[1..=t].iter().product()
    }

    /// Drift view: relative change of the signal scale over one step.
    pub fn drift(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps);
        (self.alphas[t].sqrt() - self.alphas[t - 1].sqrt()) / self.alphas[t - 1].sqrt()
    }

    /// Diffusion view: change of the noise scale over one step.
    pub fn diffusion(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps);
        (1.0 - self.alphas[t]) - (1.0 - self.alphas[t - 1])
    }

    /// Coefficient of `z_0` in the marginal at step `t`.
    pub fn signal_coef(&self, t: usize) -> f64 {
        if self.variance_preserving {
            self.alpha_bar(t).sqrt()
        } else {
            self.alphas[t].sqrt()
        }
    }

    /// Coefficient of the noise in the marginal at step `t`.
    pub fn noise_coef(&self, t: usize) -> f64 {
        if self.variance_preserving {
            (1.0 - self.alpha_bar(t)).sqrt()
        } else {
            1.0 - self.alphas[t]
        }
    }

    /// One-step kernel `z_t = r z_{t-1} + s eps` whose composition reproduces
    /// the marginals above. Returns `(r, s)`.
    pub fn step_kernel(&self, t: usize) -> (f64, f64) {
        assert!(t >= 1 && t <= self.steps);
        let r = self.signal_coef(t) / self.signal_coef(t - 1);
        let prev = self.noise_coef(t - 1);
        let var = self.noise_coef(t).powi(2) - r * r * prev * prev;
        (r, var.max(0.0).sqrt())
    }
}

/// Joint latents: rows are note positions, columns are the note, chord and
/// section blocks of width `dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub dim: usize,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Tensor, dim: usize, t: usize) -> Result<Self> {
        if z.cols != 3 * dim {
            return Err(Error::ShapeMismatch(format!("latent width {} is not 3 x {dim}", z.cols)));
        }
        Ok(LatentState { z, dim, t })
    }

    pub fn positions(&self) -> usize {
        self.z.rows
    }

    /// Copy of one branch block (0 = note, 1 = chord, 2 = section).
    pub fn branch(&self, k: usize) -> Tensor {
        slice_block(&self.z, k, self.dim)
    }

    pub fn set_branch(&mut self, k: usize, block: &Tensor) {
        let d = self.dim;
        for r in 0..self.z.rows {
            self.z.row_mut(r)[k * d..(k + 1) * d].copy_from_slice(block.row(r));
        }
    }
}

pub fn slice_block(z: &Tensor, k: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(z.rows, dim);
    for r in 0..z.rows {
        out.row_mut(r).copy_from_slice(&z.row(r)[k * dim..(k + 1) * dim]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbRecord {
    pub z_t: LatentState,
    pub eps: Tensor,
    pub t: usize,
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Sample `z_t` from the closed-form marginal. `t = 0` is the identity.
pub fn perturb(schedule: &NoiseSchedule, z0: &LatentState, t: usize, rng: &mut impl Rng) -> Result<PerturbRecord> {
    schedule.check(t)?;
    let eps = standard_normal(z0.z.rows, z0.z.cols, rng);
    let z_t = perturb_with(schedule, &z0.z, &eps, t);
    Ok(PerturbRecord { z_t: LatentState { z: z_t, dim: z0.dim, t }, eps, t })
}

/// Deterministic marginal for a given noise draw.
pub fn perturb_with(schedule: &NoiseSchedule, z0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
    if t == 0 {
        return z0.clone();
    }
    let (a, b) = (schedule.signal_coef(t), schedule.noise_coef(t));
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Advance one step of the forward chain from `z_{t-1}`.
pub fn markov_step(schedule: &NoiseSchedule, z_prev: &Tensor, t: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: schedule.steps });
    }
    schedule.check(t)?;
    let (r, s) = schedule.step_kernel(t);
    let noise = standard_normal(z_prev.rows, z_prev.cols, rng);
    Ok(z_prev.zip_map(&noise, |z, e| r * z + s * e))
}

/// Log density of the standard normal over all entries of `z`.
pub fn joint_log_density(z: &LatentState) -> f64 {
    let n = z.z.len() as f64;
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * z.z.norm_sq()
}

/// One reverse update from `t` to `t - 1` given a noise prediction.
///
/// The clean estimate `(z_t - noise_coef(t) eps_hat) / signal_coef(t)` is
/// re-encoded at `t - 1`; `fresh` noise is added only for `t - 1 >= 1`.
pub fn reverse_step(schedule: &NoiseSchedule, z_t: &Tensor, t: usize, eps_hat: &Tensor, fresh: Option<&Tensor>) -> Result<Tensor> {
    if t == 0 || t > schedule.steps {
        return Err(Error::StepOutOfRange { t, max: schedule.steps });
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", z_t.shape(), eps_hat.shape())));
    }
    let (a, b) = (schedule.signal_coef(t), schedule.noise_coef(t));
    let z0 = z_t.zip_map(eps_hat, |z, e| (z - b * e) / a);
    Ok(reencode(schedule, &z0, t - 1, fresh))
}

/// `signal_coef(t) z0 + noise_coef(t) eps` (no noise at t = 0 or without `fresh`).
pub fn reencode(schedule: &NoiseSchedule, z0: &Tensor, t: usize, fresh: Option<&Tensor>) -> Tensor {
    if t == 0 {
        return z0.clone();
    }
    let a = schedule.signal_coef(t);
    match fresh {
        Some(eps) => z0.zip_map(eps, |z, e| a * z + schedule.noise_coef(t) * e),
        None => z0.map(|z| a * z),
    }
}

/// One labelled span of bars in a prompt, `[start_bar, end_bar)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSection {
    pub start_bar: u32,
    pub end_bar: u32,
    pub label: u8,
}

/// A note slot to fill: grid onset and duration in steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhythmSlot {
    pub onset: u32,
    pub duration: u32,
}

/// Chord per bar, section layout and optionally the rhythm to fill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub chords: Vec<u8>,
    pub sections: Vec<PromptSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhythm: Option<Vec<RhythmSlot>>,
}

const STEPS_PER_BAR: u32 = crate::notation::MAX_POSITIONS;

impl Prompt {
    pub fn bars(&self) -> usize {
        self.chords.len()
    }

    /// Check that the sections tile the bars and every symbol is in range.
    pub fn validate(&self) -> Result<()> {
        let n = self.chords.len() as u32;
        if n == 0 {
            return Err(Error::PromptLengthMismatch("no bars in the chord prompt".into()));
        }
        if let Some(c) = self.chords.iter().find(|&&c| c > crate::notation::NO_CHORD) {
            return Err(Error::PromptLengthMismatch(format!("chord index {c} out of range")));
        }
        let mut at = 0;
        for s in &self.sections {
            if s.start_bar != at || s.end_bar <= s.start_bar || s.label as usize >= crate::notation::NUM_SECTIONS {
                return Err(Error::PromptLengthMismatch(format!("section {s:?} does not continue at bar {at}")));
            }
            at = s.end_bar;
        }
        if at != n {
            return Err(Error::PromptLengthMismatch(format!("sections cover {at} of {n} bars")));
        }
        if let Some(r) = &self.rhythm {
            if r.is_empty() || r.iter().any(|s| s.onset >= n * STEPS_PER_BAR || s.duration == 0) {
                return Err(Error::PromptLengthMismatch("rhythm slot outside the prompt".into()));
            }
        }
        Ok(())
    }

    pub fn annotations(&self) -> Vec<crate::fragmentation::SectionAnnotation> {
        self.sections
            .iter()
            .map(|s| crate::fragmentation::SectionAnnotation {
                start: s.start_bar * STEPS_PER_BAR,
                end: s.end_bar * STEPS_PER_BAR,
                label: s.label,
            })
            .collect()
    }

    /// Explicit rhythm, or a steady eighth-note pulse.
    pub fn slots(&self) -> Vec<RhythmSlot> {
        match &self.rhythm {
            Some(r) => {
                let mut r = r.clone();
                r.sort_by_key(|s| s.onset);
                r
            }
            None => (0..self.bars() as u32 * STEPS_PER_BAR).step_by(2).map(|onset| RhythmSlot { onset, duration: 2 }).collect(),
        }
    }

    /// Prompt taken from an existing piece: its chords, sections and rhythm.
    pub fn from_piece(bars: &[crate::notation::EventBar], sections: &[crate::fragmentation::SectionAnnotation]) -> Self {
        let rhythm = bars
            .iter()
            .enumerate()
            .flat_map(|(b, bar)| {
                bar.notes
                    .iter()
                    .map(move |e| RhythmSlot { onset: b as u32 * STEPS_PER_BAR + e.position as u32, duration: e.duration as u32 })
            })
            .collect();
        Prompt {
            chords: bars.iter().map(|b| b.chord).collect(),
            sections: sections
                .iter()
                .map(|s| PromptSection { start_bar: s.start / STEPS_PER_BAR, end_bar: s.end.div_ceil(STEPS_PER_BAR), label: s.label })
                .collect(),
            rhythm: Some(rhythm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    /// Refresh the chord/section latents every `k` reverse steps (0 = never).
    pub refrag_every: usize,
    /// Weight of the conditional-minus-unconditional contrast.
    pub guidance: f64,
    pub velocity: u8,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { refrag_every: 1, guidance: 0.0, velocity: 80 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub score: crate::midi::QuantizedScore,
    pub pitches: Vec<u8>,
    /// Sections in effect after the last refresh.
    pub sections: Vec<crate::fragmentation::SectionAnnotation>,
    pub steps: usize,
}

fn prompt_triplets(
    prompt: &Prompt,
    slots: &[RhythmSlot],
    pitches: &[u8],
    chords: &[u8],
    sections: &[crate::fragmentation::SectionAnnotation],
) -> Vec<crate::notation::Triplet> {
    slots
        .iter()
        .zip(pitches)
        .map(|(s, &p)| {
            let bar = (s.onset / STEPS_PER_BAR) as usize;
            let label = sections.iter().find(|a| a.start <= s.onset && s.onset < a.end).map_or(0, |a| a.label);
            crate::notation::Triplet { note: p, chord: chords[bar.min(prompt.bars() - 1)], section: label }
        })
        .collect()
}

fn render(prompt: &Prompt, slots: &[RhythmSlot], pitches: &[u8], velocity: u8) -> crate::midi::QuantizedScore {
    let end = prompt.bars() as u32 * STEPS_PER_BAR;
    let notes = slots
        .iter()
        .zip(pitches)
        .map(|(s, &p)| crate::midi::GridNote {
            pitch: p,
            onset: s.onset,
            duration: s.duration.min(end - s.onset).min(crate::notation::MAX_DURATION),
            velocity,
        })
        .collect();
    crate::midi::QuantizedScore::from_notes_with_bars(crate::midi::TimeSignature::COMMON, notes, prompt.bars())
}

/// Sample a piece for `prompt`: start from noise, run the reverse chain and
/// periodically refresh the chord and section latents from the decoded notes.
pub fn generate(
    prompt: &Prompt,
    denoiser: &crate::denoiser::Denoiser,
    frozen: &crate::embedding::FrozenTables,
    fragmenter: Option<&crate::fragmentation::FragModel>,
    config: &GenerateConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    use crate::denoiser::{gumbel_decode, DenoiseInput};
    use crate::notation::{recognize_chords, ChordLabel};

    prompt.validate()?;
    let schedule = &denoiser.schedule;
    let d = denoiser.dim();
    let slots = prompt.slots();
    let n = slots.len();
    let prompt_sections = prompt.annotations();
    let uniform = vec![60u8; n];
    let base = prompt_triplets(prompt, &slots, &uniform, &prompt.chords, &prompt_sections);
    let cond = {
        let aligned: Vec<crate::notation::AlignedTriplet> = slots
            .iter()
            .zip(&base)
            .map(|(s, &t)| crate::notation::AlignedTriplet { onset: s.onset, bar: (s.onset / STEPS_PER_BAR) as usize, triplet: t })
            .collect();
        crate::train::cond_rows(&aligned, &prompt_sections)
    };
    let big_t = schedule.steps;
    let segments = crate::autodiff::Segments::single(n);
    let input = |t: usize, null: bool| DenoiseInput::new(segments.clone(), cond.clone(), vec![t]).map(|i| i.with_null(null));

    // prompt latents for the chord and section blocks, note block from noise
    let mut z = {
        let z0 = frozen.encode(&base);
        let noisy = perturb_with(schedule, &z0, &standard_normal(n, 3 * d, rng), big_t);
        let mut st = LatentState::new(noisy, d, big_t)?;
        st.set_branch(0, &standard_normal(n, d, rng));
        st
    };
    let mut sections = prompt_sections.clone();
    let mut pitches = uniform;
    for t in (1..=big_t).rev() {
        let (eps_hat, logits) = {
            let mut g = crate::autodiff::Graph::new();
            let zv = g.input(z.z.clone());
            let full = denoiser.forward(&mut g, frozen, zv, &input(t, false)?)?;
            let cat = g.concat_cols(&full.eps);
            let mut eps = g.value(cat).clone();
            let mut logits = g.value(full.logits[0]).clone();
            if config.guidance != 0.0 {
                let null = denoiser.forward(&mut g, frozen, zv, &input(t, true)?)?;
                let cat = g.concat_cols(&null.eps);
                let eps_null = g.value(cat).clone();
                let w = config.guidance;
                eps = eps.zip_map(&eps_null, |a, b| a + w * (a - b));
                logits = logits.zip_map(g.value(null.logits[0]), |a, b| a + w * (a - b));
            }
            (eps, logits)
        };
        let (picks, _) = gumbel_decode(&logits, denoiser.log_temp(), rng, true);
        pitches = picks.iter().map(|&p| p as u8).collect();
        let fresh = if t > 1 { Some(standard_normal(n, 3 * d, rng)) } else { None };
        let next = reverse_step(schedule, &z.z, t, &eps_hat, fresh.as_ref())?;
        z = LatentState::new(next, d, t - 1)?;
        let refresh = config.refrag_every > 0 && (big_t - t + 1).is_multiple_of(config.refrag_every) && t > 1;
        if refresh {
            let score = render(prompt, &slots, &pitches, config.velocity);
            let chords: Vec<u8> = recognize_chords(&score).into_iter().map(ChordLabel::token_value).collect();
            if let Some(model) = fragmenter {
                let found = crate::fragmentation::fragment(model, &score)?;
                if !found.is_empty() {
                    sections = found;
                }
            }
            let trip = prompt_triplets(prompt, &slots, &pitches, &chords, &sections);
            let z0 = frozen.encode(&trip);
            let renoised = perturb_with(schedule, &z0, &standard_normal(n, 3 * d, rng), t - 1);
            for b in 1..3 {
                z.set_branch(b, &slice_block(&renoised, b, d));
            }
        }
    }
    let draft = render(prompt, &slots, &pitches, config.velocity);
    let labels: Vec<Option<ChordLabel>> = prompt.chords.iter().map(|&c| ChordLabel::from_index(c)).collect();
    let tokens = crate::notation::encode_remi(&draft, &labels)?;
    let score = crate::notation::decode_remi(&tokens)?;
    Ok(Generation { score, pitches, sections, steps: big_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
        assert!((s.alpha(10) - 0.01).abs() < 1e-15);
        assert_eq!(s.alpha(0), 1.0);
        let c = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        assert!((c.alpha(5) - (0.5 * 0.99 + 0.01)).abs() < 1e-12);
        for sch in [&s, &c] {
            assert!(sch.alphas.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(matches!(make_schedule(ScheduleKind::Linear, 0), Err(Error::BadT(0))));
    }

    #[test]
    fn zero_step_is_identity() {
        let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
        let z0 = LatentState::new(Tensor::filled(2, 6, 0.7), 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb(&s, &z0, 0, &mut rng).unwrap().z_t.z, z0.z);
        assert!(perturb(&s, &z0, 11, &mut rng).is_err());
    }

    #[test]
    fn first_step_with_zero_noise_rescales() {
        let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
        let z1 = Tensor::row_vector(vec![0.5, -1.0]);
        let out = reverse_step(&s, &z1, 1, &Tensor::zeros(1, 2), None).unwrap();
        let a = s.alpha(1).sqrt();
        assert_eq!(out.data, vec![0.5 / a, -1.0 / a]);
    }

    #[test]
    fn log_density_at_origin() {
        let z = LatentState::new(Tensor::zeros(3, 6), 2, 0).unwrap();
        let expect = -9.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((joint_log_density(&z) - expect).abs() < 1e-12);
    }

    #[test]
    fn kernel_composes_to_marginal_variance() {
        for vp in [false, true] {
            let s = make_schedule(ScheduleKind::Cosine, 20).unwrap().with_variance_preserving(vp);
            let (mut mean, mut var) = (1.0, 0.0);
            for t in 1..=20 {
                let (r, sd) = s.step_kernel(t);
                mean *= r;
                var = r * r * var + sd * sd;
                assert!((mean - s.signal_coef(t)).abs() < 1e-12);
                assert!((var - s.noise_coef(t).powi(2)).abs() < 1e-12);
            }
        }
    }
}
