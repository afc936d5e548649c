//! Log-mel spectrogram: Hann-windowed STFT, HTK mel filterbank, natural log.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::Waveform;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub bands: usize,
    pub sample_rate: u32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { n_fft: 512, hop: 256, bands: 64, sample_rate: 16_000 }
    }
}

impl MelConfig {
    pub fn frames(&self, samples: usize) -> usize {
        if samples < self.n_fft {
            0
        } else {
            (samples - self.n_fft) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `bands × (n_fft/2 + 1)` triangular filters spaced evenly on the mel scale
/// between 0 Hz and Nyquist, peak weight 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.bands + 2).map(|i| mel_to_hz(top * i as f64 / (cfg.bands + 1) as f64)).collect();
    let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64).collect();
    (0..cfg.bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// `F×B` log-mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub frames: Tensor<f32>,
}

impl MelSpec {
    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn bands(&self) -> usize {
        self.frames.cols()
    }
}

/// Reusable STFT + filterbank state.
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    /// Nonzero span of each filter: (first bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let filters = mel_filterbank(&cfg)
            .into_iter()
            .map(|f| {
                let lo = f.iter().position(|&x| x != 0.0).unwrap_or(0);
                let hi = f.iter().rposition(|&x| x != 0.0).map_or(lo, |i| i + 1);
                (lo, f[lo..hi].to_vec())
            })
            .collect();
        Self { window: hann(cfg.n_fft), filters, fft, cfg }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Power spectrum `|X_k|^2` for each frame, `k = 0..=n_fft/2`.
    pub fn power_frames(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.cfg;
        if w.sample_rate != cfg.sample_rate {
            return Err(invalid(format!("expected {} Hz audio, got {}", cfg.sample_rate, w.sample_rate)));
        }
        if w.len() < cfg.n_fft {
            return Err(invalid(format!("waveform of {} samples is shorter than n_fft {}", w.len(), cfg.n_fft)));
        }
        let bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        Ok((0..cfg.frames(w.len()))
            .map(|f| {
                let start = f * cfg.hop;
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(w.samples[start + i] as f64 * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..bins].iter().map(|c| c.norm_sqr()).collect()
            })
            .collect())
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpec> {
        let power = self.power_frames(w)?;
        let bands = self.cfg.bands;
        let mut data = Vec::with_capacity(power.len() * bands);
        for frame in &power {
            for (lo, filt) in &self.filters {
                let e: f64 = filt.iter().zip(&frame[*lo..]).map(|(a, b)| a * b).sum();
                data.push(e.max(LOG_FLOOR).ln() as f32);
            }
        }
        Ok(MelSpec { frames: Tensor::new(vec![power.len(), bands], data)? })
    }
}

/// Log-mel spectrogram with default parameters.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpec> {
    MelExtractor::new(MelConfig::default()).compute(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, len: usize) -> Waveform {
        Waveform::new((0..len).map(|i| (amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()) as f32).collect())
    }

    /// Direct O(N^2) DFT power of one frame.
    fn dft_power(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn frame_count() {
        let m = mel_spectrogram(&Waveform::silence(32_000)).unwrap();
        assert_eq!(m.frame_count(), 124);
        assert_eq!(m.bands(), 64);
    }

    #[test]
    fn silence_hits_floor() {
        let m = mel_spectrogram(&Waveform::silence(32_000)).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        assert!(m.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(mel_spectrogram(&Waveform::silence(511)).is_err());
    }

    #[test]
    fn fft_matches_direct_dft() {
        let ex = MelExtractor::new(MelConfig::default());
        let w = sine(1000.0, 0.5, 2048);
        let fast = ex.power_frames(&w).unwrap();
        let win = hann(512);
        let frame: Vec<f64> = (0..512).map(|i| w.samples[256 + i] as f64 * win[i]).collect();
        let slow = dft_power(&frame);
        for (a, b) in fast[1].iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn sine_lands_in_its_band() {
        let cfg = MelConfig::default();
        let filters = mel_filterbank(&cfg);
        // Oracle: the DFT of the windowed sine peaks at bin 32 (1000 Hz * 512 / 16000).
        let w = sine(1000.0, 0.5, 32_000);
        let win = hann(512);
        let frame: Vec<f64> = (0..512).map(|i| w.samples[i] as f64 * win[i]).collect();
        let spec = dft_power(&frame);
        let peak_bin = (0..spec.len()).max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap();
        assert_eq!(peak_bin, 32);
        let band = (0..cfg.bands).max_by(|&a, &b| filters[a][peak_bin].total_cmp(&filters[b][peak_bin])).unwrap();

        let m = mel_spectrogram(&w).unwrap();
        let hits = (0..m.frame_count())
            .filter(|&f| {
                let row = m.frames.row(f);
                (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() == band
            })
            .count();
        assert!(hits as f64 >= 0.95 * m.frame_count() as f64, "{hits}");
    }

    #[test]
    fn hop_delay_shifts_frames() {
        let w = sine(440.0, 0.3, 8000);
        let mut delayed = vec![0.0f32; 256];
        delayed.extend_from_slice(&w.samples[..8000 - 256]);
        let a = mel_spectrogram(&w).unwrap();
        let b = mel_spectrogram(&Waveform::new(delayed)).unwrap();
        for f in 1..a.frame_count() - 1 {
            for (x, y) in a.frames.row(f - 1).iter().zip(b.frames.row(f)) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let w = sine(700.0, 0.2, 4000);
        let w2 = Waveform::new(w.samples.iter().map(|s| s * 2.0).collect());
        let ex = MelExtractor::new(MelConfig::default());
        // Compare in f64 before the f32 store to isolate the property from storage rounding.
        let (p1, p2) = (ex.power_frames(&w).unwrap(), ex.power_frames(&w2).unwrap());
        for (f1, f2) in p1.iter().zip(&p2) {
            for (lo, filt) in &ex.filters {
                let e1: f64 = filt.iter().zip(&f1[*lo..]).map(|(a, b)| a * b).sum();
                let e2: f64 = filt.iter().zip(&f2[*lo..]).map(|(a, b)| a * b).sum();
                if e1 > LOG_FLOOR && e2 > LOG_FLOOR {
                    assert!((e2.ln() - e1.ln() - 4f64.ln()).abs() <= 1e-4);
                }
            }
        }
    }
}
