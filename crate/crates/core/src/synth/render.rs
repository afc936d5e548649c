use std::f64::consts::PI;

use rand::Rng;

use super::scene::{EventKind, Scene};
use crate::audio::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::Result;
use crate::rng;

const FADE_SECONDS: f64 = 0.005;
const CLICK_SECONDS: f64 = 0.010;
const CLICK_RATE_HZ: f64 = 8.0;
const PEAK: f64 = 0.9;

/// Synthesizes a scene as a 2 s clip at 16 kHz.
pub fn render_waveform(scene: &Scene) -> Result<Waveform> {
    scene.validate()?;
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0f64; CLIP_SAMPLES];
    for (idx, ev) in scene.events.iter().enumerate() {
        let start = (ev.start() * sr).round() as usize;
        let len = ((ev.duration() * sr).round() as usize).min(CLIP_SAMPLES - start);
        let fade = (FADE_SECONDS * sr).round() as usize;
        let mut noise = rng::stream(rng::mix(scene.seed, idx as u64 + 1));
        for i in 0..len {
            let t = i as f64 / sr;
            let v = match ev.kind {
                EventKind::Tone(p) => (2.0 * PI * p.hz() * t).sin(),
                EventKind::Chirp(p) => {
                    let (f0, f1) = p.band();
                    let rate = (f1 - f0) / ev.duration();
                    (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
                }
                EventKind::NoiseBurst => noise.random_range(-1.0..=1.0),
                EventKind::ClickTrain => {
                    if (t * CLICK_RATE_HZ).fract() < CLICK_SECONDS * CLICK_RATE_HZ {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let ramp_in = ((i + 1) as f64 / fade as f64).min(1.0);
            let ramp_out = ((len - i) as f64 / fade as f64).min(1.0);
            out[start + i] += ev.amplitude * v * ramp_in.min(ramp_out);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { PEAK / peak } else { 0.0 };
    Ok(Waveform::new(out.into_iter().map(|v| (v * gain) as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_filterbank, mel_spectrogram, MelConfig};
    use crate::synth::scene::{Event, Pitch};

    fn one(kind: EventKind, start: u32, dur: u32) -> Scene {
        Scene { events: vec![Event { kind, start_units: start, dur_units: dur, amplitude: 0.8 }], seed: 3 }
    }

    #[test]
    fn silent_outside_events() {
        let s = one(EventKind::NoiseBurst, 5, 4);
        let w = render_waveform(&s).unwrap();
        assert_eq!(w.len(), CLIP_SAMPLES);
        assert!(w.samples[..8000].iter().all(|&v| v == 0.0));
        assert!(w.samples[14_400..].iter().all(|&v| v == 0.0));
        let peak = w.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.9).abs() < 1e-6);
    }

    #[test]
    fn deterministic() {
        let s = Scene::random(11);
        assert_eq!(render_waveform(&s).unwrap(), render_waveform(&s).unwrap());
    }

    #[test]
    fn mid_tone_dominates_its_band() {
        let s = one(EventKind::Tone(Pitch::Mid), 5, 8);
        let m = mel_spectrogram(&render_waveform(&s).unwrap()).unwrap();
        let filters = mel_filterbank(&MelConfig::default());
        // 880 Hz sits at FFT bin 28.16; take the band with most weight around it.
        let bin = (880.0f64 * 512.0 / 16000.0).round() as usize;
        let band = (0..filters.len()).max_by(|&a, &b| filters[a][bin].total_cmp(&filters[b][bin])).unwrap();
        // Frames fully inside the event: samples 8000..20800.
        let inside: Vec<usize> = (0..m.frame_count()).filter(|&f| f * 256 >= 8000 && f * 256 + 512 <= 20800).collect();
        let hits = inside
            .iter()
            .filter(|&&f| {
                let row = m.frames.row(f);
                (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() == band
            })
            .count();
        assert!(hits as f64 >= 0.95 * inside.len() as f64, "{hits}/{}", inside.len());
    }

    #[test]
    fn overlap_is_an_error() {
        let mut s = one(EventKind::ClickTrain, 0, 5);
        s.events.push(Event { kind: EventKind::NoiseBurst, start_units: 3, dur_units: 5, amplitude: 0.5 });
        assert!(render_waveform(&s).is_err());
    }
}
