//! Noise schedule, forward corruption and strided ancestral sampling with guidance.

mod sampler;
mod schedule;

pub use sampler::{sample_batch, sample_caption, sample_seeded, Guidance, Sample, SamplerConfig};
pub use schedule::{cfg_combine, step_sequence, NoiseSchedule};
