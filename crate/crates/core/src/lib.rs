//! Non-autoregressive audio captioning with continuous text diffusion.

pub mod audio;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
mod nn;
pub mod numerics;
pub mod rng;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ScheduleConfig};
pub use numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
