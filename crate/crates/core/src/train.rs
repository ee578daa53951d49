//! Denoiser training: corpus preparation, batched noisy targets, branch
//! weighting by min-norm multipliers and the optimizer update.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{flatten, Graph, Segments, Tensor};
use crate::denoiser::{loss_nodes, CondRow, DenoiseInput, Denoiser};
use crate::diffusion::{perturb_with, slice_block, standard_normal};
use crate::embedding::FrozenTables;
use crate::error::{Error, Result};
use crate::fragmentation::SectionAnnotation;
use crate::notation::{align_triplets, AlignedTriplet, EventBar, Triplet, MAX_POSITIONS};
use crate::optim::{sgd_step, Adam, AdamConfig};
use crate::pareto::{kl_objectives_graph, solve_multipliers};

/// One training sequence: a triplet and a conditioning row per note.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPiece {
    pub triplets: Vec<Triplet>,
    pub cond: Vec<CondRow>,
    pub onsets: Vec<u32>,
    pub bars: usize,
}

/// Conditioning rows for aligned triplets.
pub fn cond_rows(aligned: &[AlignedTriplet], sections: &[SectionAnnotation]) -> Vec<CondRow> {
    let spb = MAX_POSITIONS;
    aligned
        .iter()
        .map(|a| {
            let start_bar = sections.iter().find(|s| s.start <= a.onset && a.onset < s.end).map_or(0, |s| (s.start / spb) as usize);
            CondRow {
                chord: a.triplet.chord,
                section: a.triplet.section,
                onset: (a.onset % spb) as u8,
                bar_offset: (a.bar - start_bar).min(u8::MAX as usize) as u8,
            }
        })
        .collect()
}

impl DiffusionPiece {
    pub fn from_bars(bars: &[EventBar], sections: &[SectionAnnotation]) -> Result<Self> {
        let aligned = align_triplets(bars, MAX_POSITIONS, sections)?;
        if aligned.is_empty() {
            return Err(Error::EmptyScore);
        }
        Ok(DiffusionPiece {
            triplets: aligned.iter().map(|a| a.triplet).collect(),
            cond: cond_rows(&aligned, sections),
            onsets: aligned.iter().map(|a| a.onset).collect(),
            bars: bars.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub optimizer: OptimizerKind,
    /// Weight branches by min-norm multipliers of their KL gradients.
    pub pareto: bool,
    /// Solve one multiplier per (branch, item) instead of per branch; a
    /// branch's weight is the sum of its items' multipliers.
    pub pareto_per_item: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch: 8, optimizer: OptimizerKind::Adam, pareto: true, pareto_per_item: false, clip_norm: None, seed: 5 }
    }
}

/// Per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Mean noise regression over the three branches.
    pub regression: f64,
    pub branch_regression: [f64; 3],
    pub branch_ce: [f64; 3],
    pub kl: [f64; 3],
    pub multipliers: [f64; 3],
    pub lr: f64,
}

/// One stacked batch of noisy latents with its targets.
pub struct NoisyBatch {
    pub z_t: Tensor,
    pub eps: Tensor,
    pub input: DenoiseInput,
    pub targets: Vec<Triplet>,
}

fn stack(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols;
    let rows = parts.iter().map(|t| t.rows).sum();
    let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Build a batch with explicit steps, noises and dropout flags.
pub fn make_batch(
    model: &Denoiser,
    frozen: &FrozenTables,
    pieces: &[&DiffusionPiece],
    steps: &[usize],
    eps: &[Tensor],
    nulls: &[bool],
) -> Result<NoisyBatch> {
    let mut zs = Vec::with_capacity(pieces.len());
    for ((p, &t), e) in pieces.iter().zip(steps).zip(eps) {
        let z0 = frozen.encode(&p.triplets);
        zs.push(perturb_with(&model.schedule, &z0, e, t));
    }
    let segments = Segments(pieces.iter().map(|p| p.len()).collect());
    let cond = pieces.iter().flat_map(|p| p.cond.iter().copied()).collect();
    let mut input = DenoiseInput::new(segments, cond, steps.to_vec())?;
    input.null_cond = nulls.to_vec();
    Ok(NoisyBatch { z_t: stack(&zs), eps: stack(eps), input, targets: pieces.iter().flat_map(|p| p.triplets.iter().copied()).collect() })
}

/// Random steps, noises and dropout flags for each piece.
pub fn sample_batch(model: &Denoiser, frozen: &FrozenTables, pieces: &[&DiffusionPiece], rng: &mut impl Rng) -> Result<NoisyBatch> {
    let d = model.dim();
    let steps: Vec<usize> = pieces.iter().map(|_| rng.random_range(1..=model.schedule.steps)).collect();
    let eps: Vec<Tensor> = pieces.iter().map(|p| standard_normal(p.len(), 3 * d, rng)).collect();
    let nulls: Vec<bool> = pieces.iter().map(|_| rng.random::<f64>() < model.config.cond_dropout).collect();
    make_batch(model, frozen, pieces, &steps, &eps, &nulls)
}

/// Regression loss of a batch without recording gradients.
pub fn batch_regression(model: &Denoiser, frozen: &FrozenTables, batch: &NoisyBatch) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.input(batch.z_t.clone());
    let out = model.forward(&mut g, frozen, z, &batch.input)?;
    let nodes = loss_nodes(&mut g, &out, &batch.eps, &batch.targets, model.dim(), model.config.aux_weight)?;
    Ok(g.value(nodes.regression).item())
}

/// A fixed evaluation batch: every piece at `probes` evenly spaced steps with
/// seeded noise and full conditioning.
pub fn probe_batch(model: &Denoiser, frozen: &FrozenTables, pieces: &[DiffusionPiece], probes: usize, seed: u64) -> Result<NoisyBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big_t = model.schedule.steps;
    let mut refs = Vec::new();
    let mut steps = Vec::new();
    for p in pieces {
        for k in 0..probes {
            refs.push(p);
            steps.push(1 + (k * big_t) / probes.max(1));
        }
    }
    let eps: Vec<Tensor> = refs.iter().map(|p| standard_normal(p.len(), 3 * model.dim(), &mut rng)).collect();
    let nulls = vec![false; refs.len()];
    make_batch(model, frozen, &refs, &steps, &eps, &nulls)
}

pub struct Trainer {
    pub model: Denoiser,
    pub frozen: FrozenTables,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    cursor: usize,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(model: Denoiser, frozen: FrozenTables, config: TrainConfig) -> Self {
        let adam = Adam::new(&model.store, AdamConfig { clip_norm: config.clip_norm, ..Default::default() });
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Trainer { model, frozen, config, adam, rng, cursor: 0, order: Vec::new() }
    }

    fn next_pieces<'a>(&mut self, corpus: &'a [DiffusionPiece]) -> Vec<&'a DiffusionPiece> {
        use rand::seq::SliceRandom;
        let want = self.config.batch.min(corpus.len()).max(1);
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.cursor >= self.order.len() {
                self.order = (0..corpus.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(&corpus[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self, corpus: &[DiffusionPiece], lr: f64) -> Result<StepReport> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput);
        }
        let pieces = self.next_pieces(corpus);
        let batch = sample_batch(&self.model, &self.frozen, &pieces, &mut self.rng)?;
        self.step_on(&batch, lr)
    }

    pub fn step_on(&mut self, batch: &NoisyBatch, lr: f64) -> Result<StepReport> {
        let d = self.model.dim();
        let mut g = Graph::new();
        let z = g.input(batch.z_t.clone());
        let out = self.model.forward(&mut g, &self.frozen, z, &batch.input)?;
        let nodes = loss_nodes(&mut g, &out, &batch.eps, &batch.targets, d, self.model.config.aux_weight)?;
        let mut kl = [0.0; 3];
        let mut weights = [1.0 / 3.0; 3];
        let items = batch.input.segments.0.len();
        if self.config.pareto && items >= 2 {
            let mut kl_grads = Vec::new();
            let mut owner = Vec::new();
            for b in 0..3 {
                let truth = slice_block(&batch.eps, b, d);
                let per_item = kl_objectives_graph(&mut g, out.eps[b], &truth, &batch.input.segments)?;
                let mean = g.mean(per_item);
                kl[b] = g.value(mean).item();
                let objectives =
                    if self.config.pareto_per_item { (0..items).map(|i| g.gather_rows(per_item, &[i])).collect() } else { vec![mean] };
                for obj in objectives {
                    let grads = g.backward(obj)?;
                    kl_grads.push(unit(flatten(&grads.for_params(&g, &self.model.store))));
                    owner.push(b);
                }
            }
            let m = solve_multipliers(&kl_grads);
            weights = [0.0; 3];
            for (&b, w) in owner.iter().zip(&m.weights) {
                weights[b] += w;
            }
        }
        let weighted: Vec<_> = (0..3).map(|b| g.scale(nodes.branch_total[b], weights[b])).collect();
        let s01 = g.add(weighted[0], weighted[1]);
        let total = g.add(s01, weighted[2]);
        let grads = g.backward(total)?.for_params(&g, &self.model.store);
        match self.config.optimizer {
            OptimizerKind::Adam => {
                self.adam.config.lr = lr;
                self.adam.step(&mut self.model.store, &grads);
            }
            OptimizerKind::Sgd => sgd_step(&mut self.model.store, &grads, lr),
        }
        let val = |v| g.value(v).item();
        Ok(StepReport {
            regression: val(nodes.regression),
            branch_regression: [val(nodes.mse[0]), val(nodes.mse[1]), val(nodes.mse[2])],
            branch_ce: [val(nodes.ce[0]), val(nodes.ce[1]), val(nodes.ce[2])],
            kl,
            multipliers: weights,
            lr,
        })
    }
}

/// `v` scaled to unit norm; the zero vector is returned unchanged.
fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Mean of the step reports over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub ce: [f64; 3],
    pub multipliers: [f64; 3],
    pub lr: f64,
}

impl EpochRecord {
    fn from_steps(epoch: usize, total_steps: usize, reports: &[StepReport]) -> Self {
        let n = reports.len() as f64;
        let avg3 = |f: fn(&StepReport) -> [f64; 3]| {
            let mut out = [0.0; 3];
            for r in reports {
                for (o, v) in out.iter_mut().zip(f(r)) {
                    *o += v / n;
                }
            }
            out
        };
        EpochRecord {
            epoch,
            steps: total_steps,
            loss: reports.iter().map(|r| r.regression).sum::<f64>() / n,
            ce: avg3(|r| r.branch_ce),
            multipliers: avg3(|r| r.multipliers),
            lr: reports.last().map_or(0.0, |r| r.lr),
        }
    }
}

pub fn write_epoch_log(records: &[EpochRecord], mut out: impl std::io::Write) -> Result<()> {
    writeln!(out, "epoch,steps,loss,ce_note,ce_chord,ce_section,w_note,w_chord,w_section,lr")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch, r.steps, r.loss, r.ce[0], r.ce[1], r.ce[2], r.multipliers[0], r.multipliers[1], r.multipliers[2], r.lr
        )?;
    }
    Ok(())
}

/// Run epochs of `epoch_steps` steps under the decay and early-stop policy,
/// stopping early after `max_steps` steps if given. `on_step` sees every
/// step's index and report.
pub fn train_epochs(
    trainer: &mut Trainer,
    corpus: &[DiffusionPiece],
    policy: &crate::optim::EpochPolicy,
    epoch_steps: usize,
    max_steps: Option<usize>,
    mut on_step: impl FnMut(usize, &StepReport, &Trainer) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..policy.max_epochs {
        let lr = policy.lr_at(epoch);
        let mut reports = Vec::with_capacity(epoch_steps);
        for _ in 0..epoch_steps.max(1) {
            if max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let r = trainer.step(corpus, lr)?;
            on_step(step, &r, trainer)?;
            reports.push(r);
            step += 1;
        }
        if reports.is_empty() {
            break;
        }
        let rec = EpochRecord::from_steps(epoch, step, &reports);
        log::info!("epoch {epoch} loss {:.5} lr {:.2e}", rec.loss, rec.lr);
        losses.push(rec.loss);
        records.push(rec);
        if policy.should_stop(&losses) {
            break;
        }
    }
    Ok(records)
}
