use super::schedule::{cfg_combine, step_sequence, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::numerics::{ParamStore, Tensor};
use crate::rng;
use crate::text::TokenSeq;

/// Which denoiser branches drive the reverse chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guidance {
    /// Conditional and null branches extrapolated with weight `w`.
    Guided(f64),
    Conditional,
    Unconditional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub stride: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { guidance_scale: 2.5, stride: 60, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(invalid(format!("guidance scale must be finite and >= 0, got {}", self.guidance_scale)));
        }
        step_sequence(sched.steps(), self.stride).map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub tokens: TokenSeq,
    pub latent: Tensor<f32>,
    /// Reverse steps that evaluated the denoiser.
    pub denoiser_calls: usize,
    /// Individual denoiser evaluations for this item (two per guided step).
    pub forward_passes: usize,
}

/// Draws captions for a batch of conditioning features. Item `i` uses the
/// noise stream seeded with `base_seed + i`, so results do not depend on
/// how items are grouped into batches.
pub fn sample_batch(
    model: &Model,
    store: &ParamStore<f32>,
    sched: &NoiseSchedule,
    feats: &[&Tensor<f32>],
    guidance: Guidance,
    stride: usize,
    base_seed: u64,
) -> Result<Vec<Sample>> {
    let seeds: Vec<u64> = (0..feats.len() as u64).map(|i| base_seed.wrapping_add(i)).collect();
    sample_seeded(model, store, sched, feats, guidance, stride, &seeds)
}

/// Like [`sample_batch`] with an explicit seed per item.
pub fn sample_seeded(
    model: &Model,
    store: &ParamStore<f32>,
    sched: &NoiseSchedule,
    feats: &[&Tensor<f32>],
    guidance: Guidance,
    stride: usize,
    seeds: &[u64],
) -> Result<Vec<Sample>> {
    if let Guidance::Guided(w) = guidance {
        if !w.is_finite() || w < 0.0 {
            return Err(invalid(format!("guidance scale must be finite and >= 0, got {w}")));
        }
    }
    if seeds.len() != feats.len() {
        return Err(invalid("one seed per item required"));
    }
    if sched.steps() > model.cfg.denoiser.max_step {
        return Err(invalid(format!("schedule has {} steps but the denoiser accepts at most {}", sched.steps(), model.cfg.denoiser.max_step)));
    }
    let seq = step_sequence(sched.steps(), stride)?;
    let n = feats.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let shape = [model.max_len(), model.width()];
    let mut streams: Vec<rng::Stream> = seeds.iter().map(|&s| rng::stream(s)).collect();
    let mut xs: Vec<Tensor<f32>> = streams.iter_mut().map(|r| rng::normal(r, &shape)).collect();

    let passes_per_step = if matches!(guidance, Guidance::Guided(_)) { 2 } else { 1 };
    for w in seq.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let x_refs: Vec<&Tensor<f32>> = xs.iter().collect();
        let x0 = match guidance {
            Guidance::Guided(scale) => {
                let mut x_in = x_refs.clone();
                x_in.extend(x_refs.iter().copied());
                let mut audio: Vec<Option<&Tensor<f32>>> = feats.iter().map(|f| Some(*f)).collect();
                audio.extend((0..n).map(|_| None));
                let preds = model.denoiser.denoise_batch(store, &x_in, &vec![t; 2 * n], &audio)?;
                (0..n).map(|b| guided_x0(sched, t, &xs[b], &preds[b], Some((&preds[n + b], scale)))).collect::<Result<Vec<_>>>()?
            }
            Guidance::Conditional | Guidance::Unconditional => {
                let audio: Vec<Option<&Tensor<f32>>> = match guidance {
                    Guidance::Conditional => feats.iter().map(|f| Some(*f)).collect(),
                    _ => vec![None; n],
                };
                let preds = model.denoiser.denoise_batch(store, &x_refs, &vec![t; n], &audio)?;
                (0..n).map(|b| guided_x0(sched, t, &xs[b], &preds[b], None)).collect::<Result<Vec<_>>>()?
            }
        };
        for b in 0..n {
            let z = if t_prev > 0 { Some(rng::normal(&mut streams[b], &shape)) } else { None };
            xs[b] = sched.reverse_step(&xs[b], t, t_prev, &x0[b], z.as_ref())?;
        }
    }
    let steps = seq.len() - 1;
    let refs: Vec<&Tensor<f32>> = xs.iter().collect();
    let rounded = model.codec.round_batch(store, &refs)?;
    Ok(rounded
        .into_iter()
        .zip(xs)
        .map(|(r, latent)| Sample { tokens: r.tokens, latent, denoiser_calls: steps, forward_passes: steps * passes_per_step })
        .collect())
}

/// Converts predictions to noise space, extrapolates, and converts back.
fn guided_x0(
    sched: &NoiseSchedule,
    t: usize,
    x_t: &Tensor<f32>,
    cond: &Tensor<f32>,
    uncond: Option<(&Tensor<f32>, f64)>,
) -> Result<Tensor<f32>> {
    let data = match uncond {
        Some((u, w)) => x_t
            .data()
            .iter()
            .zip(cond.data())
            .zip(u.data())
            .map(|((&x, &c), &u)| {
                let (x, c, u) = (x as f64, c as f64, u as f64);
                let e = cfg_combine(sched.eps_from_x0(x, c, t), sched.eps_from_x0(x, u, t), w);
                sched.x0_from_eps(x, e, t) as f32
            })
            .collect(),
        None => x_t
            .data()
            .iter()
            .zip(cond.data())
            .map(|(&x, &c)| {
                let (x, c) = (x as f64, c as f64);
                sched.x0_from_eps(x, sched.eps_from_x0(x, c, t), t) as f32
            })
            .collect(),
    };
    let out = Tensor::new(x_t.shape().to_vec(), data)?;
    if !out.is_finite() {
        return Err(crate::Error::NonFinite { op: "guidance", node: t });
    }
    Ok(out)
}

/// One caption for one clip.
pub fn sample_caption(
    model: &Model,
    store: &ParamStore<f32>,
    sched: &NoiseSchedule,
    feats: &Tensor<f32>,
    cfg: &SamplerConfig,
) -> Result<Sample> {
    cfg.validate(sched)?;
    Ok(sample_batch(model, store, sched, &[feats], Guidance::Guided(cfg.guidance_scale), cfg.stride, cfg.seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioEncoderConfig;
    use crate::denoiser::DenoiserConfig;
    use crate::model::{ModelConfig, ScheduleConfig};
    use crate::text::CodecConfig;

    fn tiny() -> (Model, ParamStore<f32>, NoiseSchedule, Vec<Tensor<f32>>) {
        let cfg = ModelConfig {
            codec: CodecConfig { max_len: 8, embed_dim: 16, heads: 2, transition_layers: 1, ..Default::default() },
            audio: AudioEncoderConfig { hidden: 16, out_dim: 16, heads: 2, layers: 1, ..Default::default() },
            denoiser: DenoiserConfig { width: 16, heads: 2, blocks: 2, max_len: 8, time_embed_dim: 8, max_step: 100, ..Default::default() },
            schedule: ScheduleConfig { steps: 100, ..Default::default() },
        };
        let mut store = ParamStore::new();
        let model = Model::new(cfg, 12, &mut store, &mut rng::stream(0)).unwrap();
        let sched = model.cfg.schedule.build().unwrap();
        let feats = (0..3).map(|i| rng::normal(&mut rng::stream(10 + i), &[4, 16])).collect();
        (model, store, sched, feats)
    }

    #[test]
    fn unit_scale_matches_conditional() {
        let (model, store, sched, feats) = tiny();
        let refs: Vec<&Tensor<f32>> = feats.iter().collect();
        let g = sample_batch(&model, &store, &sched, &refs, Guidance::Guided(1.0), 7, 5).unwrap();
        let c = sample_batch(&model, &store, &sched, &refs, Guidance::Conditional, 7, 5).unwrap();
        for (a, b) in g.iter().zip(&c) {
            assert_eq!(a.latent.data(), b.latent.data());
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn zero_scale_matches_unconditional() {
        let (model, store, sched, feats) = tiny();
        let refs: Vec<&Tensor<f32>> = feats.iter().collect();
        let g = sample_batch(&model, &store, &sched, &refs, Guidance::Guided(0.0), 7, 5).unwrap();
        let u = sample_batch(&model, &store, &sched, &refs, Guidance::Unconditional, 7, 5).unwrap();
        for (a, b) in g.iter().zip(&u) {
            assert_eq!(a.latent.data(), b.latent.data());
        }
    }

    #[test]
    fn seeded_and_counted() {
        let (model, store, sched, feats) = tiny();
        let cfg = SamplerConfig { guidance_scale: 2.5, stride: 30, seed: 9 };
        let a = sample_caption(&model, &store, &sched, &feats[0], &cfg).unwrap();
        let b = sample_caption(&model, &store, &sched, &feats[0], &cfg).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.denoiser_calls, 4);
        assert_eq!(a.forward_passes, 8);
        assert!(a.tokens.is_well_formed());
        let other = sample_caption(&model, &store, &sched, &feats[0], &SamplerConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.latent, other.latent);
    }

    #[test]
    fn item_seed_is_position_offset() {
        let (model, store, sched, feats) = tiny();
        let refs: Vec<&Tensor<f32>> = feats.iter().collect();
        let all = sample_batch(&model, &store, &sched, &refs, Guidance::Guided(2.0), 25, 100).unwrap();
        let third = sample_batch(&model, &store, &sched, &refs[2..], Guidance::Guided(2.0), 25, 102).unwrap();
        assert!(all[2].latent.max_abs_diff(&third[0].latent) < 1e-4);
    }

    #[test]
    fn rejects_bad_settings() {
        let (model, store, sched, feats) = tiny();
        assert!(sample_batch(&model, &store, &sched, &[&feats[0]], Guidance::Guided(-1.0), 10, 0).is_err());
        assert!(sample_batch(&model, &store, &sched, &[&feats[0]], Guidance::Conditional, 0, 0).is_err());
        assert!(sample_batch(&model, &store, &sched, &[&feats[0]], Guidance::Conditional, 101, 0).is_err());
    }
}
