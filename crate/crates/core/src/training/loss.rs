use rand::Rng;

use crate::audio::MelSpec;
use crate::denoiser::AudioBatch;
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::rng;
use crate::text::TokenSeq;

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub ce: f64,
    pub valid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, ce: 1.0, valid: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.mse, self.ce, self.valid].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Scalar values of each term, unweighted, plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub ce: f64,
    pub valid: f64,
    /// Items in the batch conditioned on the null row.
    pub null_items: usize,
}

/// All randomness consumed by one diffusion-loss evaluation.
#[derive(Clone, Debug)]
pub struct Draws<F = f32> {
    pub steps: Vec<usize>,
    /// Forward-process noise, `(B·L)×D`.
    pub eps: Tensor<F>,
    /// Embedding perturbation before scaling by `sigma0`, `(B·L)×D`.
    pub embed_noise: Tensor<F>,
    pub use_null: Vec<bool>,
}

impl<F: Real> Draws<F> {
    pub fn sample(r: &mut impl Rng, batch: usize, len: usize, dim: usize, max_step: usize, p_uncond: f64) -> Self {
        let steps = (0..batch).map(|_| r.random_range(1..=max_step)).collect();
        let use_null = (0..batch).map(|_| r.random::<f64>() < p_uncond).collect();
        let eps = rng::normal(r, &[batch * len, dim]);
        let embed_noise = rng::normal(r, &[batch * len, dim]);
        Self { steps, eps, embed_noise, use_null }
    }
}

/// Row weights averaging over each item's valid positions, then over the batch.
pub(crate) fn valid_row_weights<F: Real>(seqs: &[&TokenSeq], per_row: f64) -> Result<Vec<F>> {
    let b = seqs.len() as f64;
    let mut w = Vec::new();
    for s in seqs {
        let n = s.valid.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(crate::Error::NoValidPositions);
        }
        let each = F::lit(1.0 / (b * n as f64 * per_row));
        w.extend(s.valid.iter().map(|&v| if v { each } else { F::zero() }));
    }
    Ok(w)
}

fn bce_terms<F: Real>(seqs: &[&TokenSeq]) -> (Vec<F>, Vec<F>) {
    let n: usize = seqs.iter().map(|s| s.len()).sum();
    let targets = seqs.iter().flat_map(|s| s.valid.iter().map(|&v| if v { F::one() } else { F::zero() })).collect();
    (targets, vec![F::lit(1.0 / n as f64); n])
}

/// Denoising objective on a batch: MSE of the clean-latent prediction over
/// valid positions, token cross-entropy of the rounded prediction over valid
/// positions and valid-token BCE over all positions.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<F: Real>(
    g: &mut Graph<F>,
    model: &Model,
    store: &ParamStore<F>,
    sched: &NoiseSchedule,
    seqs: &[&TokenSeq],
    mels: &[&MelSpec],
    draws: &Draws<F>,
    weights: LossWeights,
) -> Result<(Var, LossParts)> {
    let b = seqs.len();
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    if mels.len() != b || draws.steps.len() != b || draws.use_null.len() != b {
        return Err(invalid("batch components disagree in length"));
    }
    let (l, d) = (model.max_len(), model.width());
    let noise = draws.embed_noise.map(|z| z * F::lit(model.cfg.codec.sigma0));
    let x0 = model.codec.embed_graph(g, store, seqs, Some(noise))?;

    let mut a = Vec::with_capacity(b * l);
    let mut c = Vec::with_capacity(b * l);
    for &t in &draws.steps {
        if t == 0 || t > sched.steps() {
            return Err(crate::Error::StepOutOfRange { step: t, min: 1, max: sched.steps() });
        }
        a.extend(std::iter::repeat_n(F::lit(sched.alpha_bar(t).sqrt()), l));
        c.extend(std::iter::repeat_n((1.0 - sched.alpha_bar(t)).sqrt(), l));
    }
    let scaled_eps = Tensor::new(
        vec![b * l, d],
        draws.eps.data().iter().enumerate().map(|(i, &e)| e * F::lit(c[i / d])).collect(),
    )?;
    let signal = g.scale_rows(x0, a)?;
    let noise = g.input(scaled_eps)?;
    let x_t = g.add(signal, noise)?;

    let cond: Vec<&MelSpec> = mels.iter().zip(&draws.use_null).filter(|(_, &n)| !n).map(|(m, _)| *m).collect();
    let audio = if cond.is_empty() {
        None
    } else {
        let (feats, m) = model.audio.features(g, store, &cond)?;
        let lens = draws.use_null.iter().map(|&n| if n { 0 } else { m }).collect();
        Some(AudioBatch { feats, lens })
    };
    let x0_hat = model.denoiser.forward(g, store, x_t, &draws.steps, audio.as_ref(), &draws.use_null)?;

    let (total, parts) = prediction_loss(g, model, store, seqs, x0, x0_hat, weights)?;
    Ok((total, LossParts { null_items: draws.use_null.iter().filter(|&&n| n).count(), ..parts }))
}

/// The three weighted terms for a clean-latent prediction `x0_hat` of `x0`.
pub fn prediction_loss<F: Real>(
    g: &mut Graph<F>,
    model: &Model,
    store: &ParamStore<F>,
    seqs: &[&TokenSeq],
    x0: Var,
    x0_hat: Var,
    weights: LossWeights,
) -> Result<(Var, LossParts)> {
    let b = seqs.len();
    let d = model.width();
    let mse = g.weighted_sq_err(x0_hat, x0, valid_row_weights(seqs, d as f64)?)?;
    let (logits, valid_logits) = model.codec.heads(g, store, x0_hat, b)?;
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let ce = g.weighted_xent(logits, targets, valid_row_weights(seqs, 1.0)?)?;
    let (vt, vw) = bce_terms(seqs);
    let valid = g.weighted_bce(valid_logits, vt, vw)?;
    let total = weighted_sum(g, &[(mse, weights.mse), (ce, weights.ce), (valid, weights.valid)])?;
    let parts = LossParts {
        total: g.value(total).item().as_f64(),
        mse: g.value(mse).item().as_f64(),
        ce: g.value(ce).item().as_f64(),
        valid: g.value(valid).item().as_f64(),
        null_items: 0,
    };
    Ok((total, parts))
}

/// Rounding objective on noisy embeddings: token cross-entropy at every
/// position plus valid-token BCE.
pub fn codec_loss<F: Real>(
    g: &mut Graph<F>,
    model: &Model,
    store: &ParamStore<F>,
    seqs: &[&TokenSeq],
    embed_noise: &Tensor<F>,
    valid_weight: f64,
) -> Result<(Var, LossParts)> {
    let b = seqs.len();
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    let noise = embed_noise.map(|z| z * F::lit(model.cfg.codec.sigma0));
    let x0 = model.codec.embed_graph(g, store, seqs, Some(noise))?;
    let (logits, valid_logits) = model.codec.heads(g, store, x0, b)?;
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let n = targets.len();
    let ce = g.weighted_xent(logits, targets, vec![F::lit(1.0 / n as f64); n])?;
    let (vt, vw) = bce_terms(seqs);
    let valid = g.weighted_bce(valid_logits, vt, vw)?;
    let parts = LossParts {
        ce: g.value(ce).item().as_f64(),
        valid: g.value(valid).item().as_f64(),
        ..Default::default()
    };
    let total = weighted_sum(g, &[(ce, 1.0), (valid, valid_weight)])?;
    Ok((total, LossParts { total: g.value(total).item().as_f64(), ..parts }))
}

fn weighted_sum<F: Real>(g: &mut Graph<F>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, F::lit(w))?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| invalid("no loss terms"))
}
