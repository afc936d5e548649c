//! RIFF WAV, PCM 16-bit mono, little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// Fixed clip length: 2.0 s at 16 kHz.
pub const CLIP_SAMPLES: usize = 32_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn silence(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Zero-pads or truncates to `len` samples.
    pub fn fit(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }

    pub fn to_wav_bytes(&self) -> Vec<u8> {
        let data_len = (self.samples.len() * 2) as u32;
        let mut out = Vec::with_capacity(44 + data_len as usize);
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes()); // PCM
        out.extend_from_slice(&1u16.to_le_bytes()); // mono
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.sample_rate * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for &s in &self.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            out.extend_from_slice(&q.to_le_bytes());
        }
        out
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Wav(m.to_string());
        if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
            return Err(err("missing RIFF/WAVE header"));
        }
        let mut pos = 12;
        let mut format: Option<(u16, u16, u32, u16)> = None;
        while pos + 8 <= bytes.len() {
            let id = &bytes[pos..pos + 4];
            let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
            let body = pos + 8;
            let end = body.checked_add(size).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated chunk"))?;
            match id {
                b"fmt " => {
                    if size < 16 {
                        return Err(err("short fmt chunk"));
                    }
                    let b = &bytes[body..end];
                    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
                    let rate = u32::from_le_bytes(b[4..8].try_into().unwrap());
                    format = Some((u16_at(0), u16_at(2), rate, u16_at(14)));
                }
                b"data" => {
                    let (tag, channels, rate, bits) = format.ok_or_else(|| err("data chunk before fmt chunk"))?;
                    if tag != 1 || channels != 1 || bits != 16 {
                        return Err(Error::Wav(format!(
                            "expected 16-bit PCM mono, got format {tag}, {channels} channels, {bits} bits"
                        )));
                    }
                    if rate != SAMPLE_RATE {
                        return Err(Error::Wav(format!("expected {SAMPLE_RATE} Hz, got {rate}")));
                    }
                    if !size.is_multiple_of(2) {
                        return Err(err("odd data length"));
                    }
                    let samples = bytes[body..end]
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32767.0)
                        .collect();
                    return Ok(Self { samples, sample_rate: rate });
                }
                _ => {}
            }
            pos = end + (size & 1);
        }
        Err(err("no data chunk"))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_wav_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_wav_bytes())?;
        Ok(())
    }
}
