//! Experiment configuration loaded from TOML. Every section and field is
//! optional; the defaults describe the toy setup used by the test suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, Parameterization};
use crate::diffusion::{make_schedule, GenerateConfig, NoiseSchedule, ScheduleKind};
use crate::embedding::JspConfig;
use crate::error::{Error, Result};
use crate::fragmentation::{FragConfig, Strategy};
use crate::notation::Notation;
use crate::optim::EpochPolicy;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub layers: usize,
    pub parameterization: Parameterization,
    pub aux_weight: f64,
    pub cond_dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        ModelSection {
            dim: d.dim,
            layers: d.layers,
            parameterization: d.parameterization,
            aux_weight: d.aux_weight,
            cond_dropout: d.cond_dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub variance_preserving: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: ScheduleKind::Linear, steps: 50, variance_preserving: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub min_improvement: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub epoch_steps: usize,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,
    pub pareto: bool,
    pub pareto_per_item: bool,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = EpochPolicy::default();
        TrainSection {
            batch: 8,
            lr: 2e-3,
            decay_factor: p.decay_factor,
            decay_every: p.decay_every,
            min_improvement: p.min_improvement,
            patience: p.patience,
            max_epochs: p.max_epochs,
            epoch_steps: 100,
            max_steps: Some(1500),
            clip_norm: Some(1.0),
            pareto: true,
            pareto_per_item: false,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JspSection {
    pub steps: usize,
    pub lr: f64,
    pub chord_batch: usize,
    pub section_batch: usize,
    pub chord_uses_note: bool,
}

impl Default for JspSection {
    fn default() -> Self {
        let j = JspConfig::default();
        JspSection {
            steps: j.steps,
            lr: j.lr,
            chord_batch: j.chord_batch,
            section_batch: j.section_batch,
            chord_uses_note: j.chord_uses_note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FragmentSection {
    pub max_sections: usize,
    pub max_window_bars: usize,
    pub strategy: Strategy,
    pub notation: Notation,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FragmentSection {
    fn default() -> Self {
        let f = FragConfig::default();
        FragmentSection {
            max_sections: f.max_sections,
            max_window_bars: f.max_window_bars,
            strategy: f.strategy,
            notation: Notation::default(),
            hidden: f.hidden,
            epochs: f.epochs,
            lr: f.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub refrag_every: usize,
    pub guidance: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let g = GenerateConfig::default();
        GenerateSection { refrag_every: g.refrag_every, guidance: g.guidance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub jsp: JspSection,
    pub fragment: FragmentSection,
    pub generate: GenerateSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection::default(),
            jsp: JspSection::default(),
            fragment: FragmentSection::default(),
            generate: GenerateSection::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| bad(e.message().replace('\n', " ")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dim < 2 || !m.dim.is_multiple_of(2) {
            return Err(bad(format!("model.dim must be an even number >= 2, got {}", m.dim)));
        }
        if m.layers == 0 {
            return Err(bad("model.layers must be >= 1"));
        }
        if !(0.0..1.0).contains(&m.cond_dropout) || m.aux_weight < 0.0 {
            return Err(bad("model.cond_dropout must be in [0, 1) and aux_weight >= 0"));
        }
        if self.schedule.steps == 0 {
            return Err(bad("schedule.steps must be >= 1"));
        }
        let t = &self.train;
        if t.batch == 0 || t.epoch_steps == 0 || t.decay_every == 0 || t.max_epochs == 0 {
            return Err(bad("train.batch, epoch_steps, decay_every and max_epochs must be >= 1"));
        }
        if t.lr <= 0.0 || !(0.0..=1.0).contains(&t.decay_factor) || t.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(bad("train.lr and clip_norm must be positive, decay_factor in [0, 1]"));
        }
        if self.jsp.steps == 0 || self.jsp.lr <= 0.0 || self.jsp.chord_batch < 2 || self.jsp.section_batch < 2 {
            return Err(bad("jsp.steps and lr must be positive, batches >= 2"));
        }
        let f = &self.fragment;
        if f.max_sections == 0 || f.max_window_bars == 0 || f.hidden == 0 || f.lr <= 0.0 {
            return Err(bad("fragment sizes and lr must be positive"));
        }
        if !self.generate.guidance.is_finite() {
            return Err(bad("generate.guidance must be finite"));
        }
        Ok(())
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.model.dim,
            layers: self.model.layers,
            parameterization: self.model.parameterization,
            aux_weight: self.model.aux_weight,
            cond_dropout: self.model.cond_dropout,
            seed: self.seed,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.schedule.kind, self.schedule.steps)?.with_variance_preserving(self.schedule.variance_preserving))
    }

    pub fn jsp_config(&self) -> JspConfig {
        JspConfig {
            dim: self.model.dim,
            steps: self.jsp.steps,
            lr: self.jsp.lr,
            chord_batch: self.jsp.chord_batch,
            section_batch: self.jsp.section_batch,
            seed: self.seed,
            chord_uses_note: self.jsp.chord_uses_note,
            ..Default::default()
        }
    }

    pub fn frag_config(&self) -> FragConfig {
        FragConfig {
            hidden: self.fragment.hidden,
            max_window_bars: self.fragment.max_window_bars,
            max_sections: self.fragment.max_sections,
            epochs: self.fragment.epochs,
            lr: self.fragment.lr,
            seed: self.seed,
            strategy: self.fragment.strategy,
            ..Default::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.train.batch,
            optimizer: self.train.optimizer,
            pareto: self.train.pareto,
            pareto_per_item: self.train.pareto_per_item,
            clip_norm: self.train.clip_norm,
            seed: self.seed,
        }
    }

    pub fn epoch_policy(&self) -> EpochPolicy {
        EpochPolicy {
            initial_lr: self.train.lr,
            decay_factor: self.train.decay_factor,
            decay_every: self.train.decay_every,
            min_improvement: self.train.min_improvement,
            patience: self.train.patience,
            max_epochs: self.train.max_epochs,
        }
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig { refrag_every: self.generate.refrag_every, guidance: self.generate.guidance, ..Default::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), c);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        assert!(matches!(Config::from_toml("[model]\ndim = 3\n"), Err(Error::ConfigInvalid(_))));
        assert!(matches!(Config::from_toml("[model]\nwidth = 8\n"), Err(Error::ConfigInvalid(_))));
        assert!(matches!(Config::from_toml("[schedule]\nsteps = 0\n"), Err(Error::ConfigInvalid(_))));
    }
}
