//! Multi-objective weighting: diagonal-Gaussian KL objectives per branch,
//! min-norm multipliers over the simplex, and the combined descent step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Segments, Tensor, Var};
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const FW_TOLERANCE: f64 = 1e-9;
pub const FW_MAX_ITERS: usize = 1000;

/// Closed-form `KL(N(mu_p, var_p) || N(mu_q, var_q))` summed over dimensions.
pub fn diag_gaussian_kl(mu_p: &[f64], var_p: &[f64], mu_q: &[f64], var_q: &[f64]) -> f64 {
    (0..mu_p.len())
        .map(|d| {
            let dm = mu_p[d] - mu_q[d];
            0.5 * (var_q[d] / var_p[d]).ln() + (var_p[d] + dm * dm) / (2.0 * var_q[d]) - 0.5
        })
        .sum()
}

/// Row weights for each item: uniform over rows, with the item's own rows
/// counted twice. Returns a (items × rows) matrix with unit row sums.
pub fn item_weights(segments: &Segments) -> Tensor {
    let n = segments.total();
    let spans: Vec<(usize, usize)> = segments.spans().collect();
    let mut w = Tensor::zeros(spans.len(), n);
    for (i, &(start, len)) in spans.iter().enumerate() {
        let total = (n + len) as f64;
        for r in 0..n {
            let own = r >= start && r < start + len;
            w.set(i, r, if own { 2.0 } else { 1.0 } / total);
        }
    }
    w
}

/// Weighted first and floored second central moments.
fn moments(weights: &Tensor, x: &Tensor) -> (Tensor, Tensor) {
    let m1 = weights.matmul(x);
    let m2 = weights.matmul(&x.map(|v| v * v));
    let var = m2.zip_map(&m1, |s, m| (s - m * m).max(VARIANCE_FLOOR));
    (m1, var)
}

/// Per-item KL divergence between a prediction node and fixed targets, with
/// moments pooled over items by [`item_weights`]. Returns an items×1 node.
pub fn kl_objectives_graph(g: &mut Graph, pred: Var, truth: &Tensor, segments: &Segments) -> Result<Var> {
    let items = segments.0.len();
    if items < 2 {
        return Err(Error::BatchTooSmall(items));
    }
    let pv = g.value(pred);
    if pv.shape() != truth.shape() || segments.total() != truth.rows {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs truth {:?}", pv.shape(), truth.shape())));
    }
    let d = truth.cols;
    let weights = item_weights(segments);
    let (mq, vq) = moments(&weights, truth);
    let w = g.input(weights);
    let mp = g.matmul(w, pred);
    let sq = g.mul(pred, pred);
    let m2 = g.matmul(w, sq);
    let mp2 = g.mul(mp, mp);
    let var = g.sub(m2, mp2);
    let vp = g.clamp_min(var, VARIANCE_FLOOR);
    let mq = g.input(mq);
    let vq_node = g.input(vq.clone());
    let log_vq = g.input(vq.map(f64::ln));
    let log_vp = g.log(vp);
    let log_ratio = g.sub(log_vq, log_vp);
    let half_log = g.scale(log_ratio, 0.5);
    let dm = g.sub(mp, mq);
    let dm2 = g.mul(dm, dm);
    let num = g.add(vp, dm2);
    let twice_vq = g.scale(vq_node, 2.0);
    let frac = g.div(num, twice_vq);
    let per_dim = g.add(half_log, frac);
    let per_dim = g.add_scalar(per_dim, -0.5);
    let ones = g.input(Tensor::filled(d, 1, 1.0));
    Ok(g.matmul(per_dim, ones))
}

/// Scalar reference for [`kl_objectives_graph`].
pub fn kl_objectives(pred: &Tensor, truth: &Tensor, segments: &Segments) -> Result<Vec<f64>> {
    if segments.0.len() < 2 {
        return Err(Error::BatchTooSmall(segments.0.len()));
    }
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let weights = item_weights(segments);
    let (mp, vp) = moments(&weights, pred);
    let (mq, vq) = moments(&weights, truth);
    Ok((0..weights.rows).map(|i| diag_gaussian_kl(mp.row(i), vp.row(i), mq.row(i), vq.row(i))).collect())
}

/// Simplex weights with their objective trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gram(grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    grads.iter().map(|a| grads.iter().map(|b| dot(a, b)).collect()).collect()
}

/// `|| sum_k w_k g_k ||^2` from the Gram matrix.
pub fn quad_form(m: &[Vec<f64>], w: &[f64]) -> f64 {
    (0..w.len()).map(|i| w[i] * dot(&m[i], w)).sum()
}

/// Minimum-norm point of the convex hull of `grads`, by Frank–Wolfe with
/// away steps and exact line search on the Gram matrix.
pub fn solve_multipliers(grads: &[Vec<f64>]) -> Multipliers {
    let k = grads.len();
    assert!(k >= 1, "at least one objective gradient is required");
    if k == 1 {
        return Multipliers { weights: vec![1.0], iterations: 0, objective: dot(&grads[0], &grads[0]) };
    }
    let raw = gram(grads);
    let scale = (0..k).map(|i| raw[i][i]).fold(0.0, f64::max);
    if scale == 0.0 {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        return Multipliers { weights: w, iterations: 0, objective: 0.0 };
    }
    let m: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|x| x / scale).collect()).collect();
    solve_on_gram(&m, scale)
}

pub(crate) fn solve_on_gram(m: &[Vec<f64>], scale: f64) -> Multipliers {
    let k = m.len();
    let start = (0..k).fold(0, |b, i| if m[i][i] < m[b][b] { i } else { b });
    let mut w = vec![0.0; k];
    w[start] = 1.0;
    let mut iterations = 0;
    while iterations < FW_MAX_ITERS {
        let mw: Vec<f64> = (0..k).map(|i| dot(&m[i], &w)).collect();
        let f = dot(&w, &mw);
        let toward = (0..k).fold(0, |b, i| if mw[i] < mw[b] { i } else { b });
        let fw_gap = f - mw[toward];
        if fw_gap < FW_TOLERANCE {
            break;
        }
        let away = (0..k).filter(|&i| w[i] > 0.0).fold(None::<usize>, |b, i| match b {
            Some(j) if mw[j] >= mw[i] => Some(j),
            _ => Some(i),
        });
        let away = away.expect("weights stay on the simplex");
        let away_gap = mw[away] - f;
        // search direction d over weights and the largest feasible step
        let (dir, max_step): (Vec<f64>, f64) = if fw_gap >= away_gap || w[away] >= 1.0 {
            let mut d: Vec<f64> = w.iter().map(|x| -x).collect();
            d[toward] += 1.0;
            (d, 1.0)
        } else {
            let mut d = w.clone();
            d[away] -= 1.0;
            (d, w[away] / (1.0 - w[away]))
        };
        let md: Vec<f64> = (0..k).map(|i| dot(&m[i], &dir)).collect();
        let curv = dot(&dir, &md);
        let slope = dot(&w, &md);
        let step = if curv <= 0.0 { max_step } else { (-slope / curv).clamp(0.0, max_step) };
        if step == 0.0 {
            break;
        }
        for i in 0..k {
            w[i] = (w[i] + step * dir[i]).max(0.0);
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        iterations += 1;
    }
    let objective = quad_form(m, &w) * scale;
    Multipliers { weights: w, iterations, objective }
}

/// `-sum_k w_k g_k`.
pub fn combine_direction(weights: &[f64], grads: &[Vec<f64>]) -> Vec<f64> {
    let n = grads[0].len();
    let mut d = vec![0.0; n];
    for (w, g) in weights.iter().zip(grads) {
        for (di, gi) in d.iter_mut().zip(g) {
            *di += w * gi;
        }
    }
    d.iter().map(|x| -x).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    pub direction: Vec<f64>,
    pub norm: f64,
    pub multipliers: Multipliers,
}

pub fn update_direction(grads: &[Vec<f64>]) -> UpdateDirection {
    let multipliers = solve_multipliers(grads);
    let direction = combine_direction(&multipliers.weights, grads);
    let norm = dot(&direction, &direction).sqrt();
    UpdateDirection { direction, norm, multipliers }
}

/// `params + lr * direction` on a flat parameter vector.
pub fn pareto_step(params: &[f64], grads: &[Vec<f64>], lr: f64) -> (Vec<f64>, UpdateDirection) {
    let dir = update_direction(grads);
    let next = params.iter().zip(&dir.direction).map(|(p, d)| p + lr * d).collect();
    (next, dir)
}

/// Apply a flat direction to a parameter store: `p += lr * d`.
pub fn apply_direction(store: &mut ParamStore, direction: &[f64], lr: f64) {
    let mut off = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        for x in t.data.iter_mut() {
            *x += lr * direction[off];
            off += 1;
        }
    }
}

/// Split a flat vector back into tensors shaped like `store`.
pub fn unflatten(store: &ParamStore, flat: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    store
        .iter()
        .map(|(_, t)| {
            let out = Tensor::from_vec(t.rows, t.cols, flat[off..off + t.len()].to_vec());
            off += t.len();
            out
        })
        .collect()
}
