//! Waveforms, log-mel features and the audio encoder.

mod encoder;
mod mel;
mod wav;

pub use encoder::{AudioEncoder, AudioEncoderConfig};
pub use mel::{hann, hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelConfig, MelExtractor, MelSpec, LOG_FLOOR};
pub use wav::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
