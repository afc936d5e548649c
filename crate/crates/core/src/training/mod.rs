//! Losses, optimizer, checkpoints and the two-stage training loop.

mod checkpoint;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use loss::{codec_loss, diffusion_loss, prediction_loss, Draws, LossParts, LossWeights};
pub use optim::{lr_at, Adam};
pub use trainer::{parse_config, ConditioningCount, Example, Stage, StepLog, TrainConfig, Trainer};
