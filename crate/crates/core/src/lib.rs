pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod fragmentation;
pub mod metrics;
pub mod midi;
pub mod notation;
pub mod optim;
pub mod pareto;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
