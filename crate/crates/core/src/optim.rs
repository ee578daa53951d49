//! First-order optimizers over a [`ParamStore`].

use crate::autodiff::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 4e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam { config, m: store.zeros_like(), v: store.zeros_like(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        let c = self.config;
        let scale = clip_scale(grads, c.clip_norm);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let g = grads[i].data[j] * scale;
                m.data[j] = c.beta1 * m.data[j] + (1.0 - c.beta1) * g;
                v.data[j] = c.beta2 * v.data[j] + (1.0 - c.beta2) * g * g;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

fn clip_scale(grads: &[Tensor], clip: Option<f64>) -> f64 {
    match clip {
        Some(max) => {
            let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

/// `param -= lr * grad` for every parameter.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], lr: f64) {
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = store.get_mut(id);
        p.data.iter_mut().zip(&grads[i].data).for_each(|(w, g)| *w -= lr * g);
    }
}

/// Step decay with loss-plateau early stopping, evaluated once per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPolicy {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub min_improvement: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for EpochPolicy {
    fn default() -> Self {
        EpochPolicy { initial_lr: 4e-4, decay_factor: 0.6, decay_every: 5, min_improvement: 5e-5, patience: 10, max_epochs: 1000 }
    }
}

impl EpochPolicy {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay_factor.powi((epoch / self.decay_every.max(1)) as i32)
    }

    /// True once the loss has improved by less than `min_improvement` over
    /// each of the last `patience` epochs, or `max_epochs` is reached.
    pub fn should_stop(&self, epoch_losses: &[f64]) -> bool {
        if epoch_losses.len() >= self.max_epochs {
            return true;
        }
        if epoch_losses.len() <= self.patience {
            return false;
        }
        epoch_losses.windows(2).rev().take(self.patience).all(|w| w[0] - w[1] < self.min_improvement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_schedule() {
        let p = EpochPolicy::default();
        assert_eq!(p.lr_at(0), 4e-4);
        assert_eq!(p.lr_at(4), 4e-4);
        assert!((p.lr_at(5) - 2.4e-4).abs() < 1e-15);
        assert!((p.lr_at(10) - 1.44e-4).abs() < 1e-15);
    }

    #[test]
    fn early_stop_needs_a_full_flat_stretch() {
        let p = EpochPolicy::default();
        let mut losses: Vec<f64> = (0..5).map(|i| 1.0 - 0.1 * i as f64).collect();
        assert!(!p.should_stop(&losses));
        losses.extend(std::iter::repeat_n(0.6, 9));
        assert!(!p.should_stop(&losses));
        losses.push(0.6);
        assert!(p.should_stop(&losses));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![1.0, -1.0]));
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut store, &[Tensor::row_vector(vec![2.0, -3.0])]);
        let w = &store.get(crate::autodiff::ParamId(0)).data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
