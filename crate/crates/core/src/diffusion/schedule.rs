use crate::error::{invalid, Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng;

/// Linear beta schedule with derived products. Index 0 holds the `t = 0`
/// convention (`alpha_bar = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
            return Err(invalid(format!("need 0 < beta1 <= betaT < 1, got {beta1} and {beta_t}")));
        }
        let mut beta = vec![0.0; steps + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if steps == 1 { beta1 } else { beta1 + (beta_t - beta1) * (t - 1) as f64 / (steps - 1) as f64 };
        }
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self { steps, beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }

    fn check(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::StepOutOfRange { step: t, min, max: self.steps });
        }
        Ok(())
    }

    /// `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps` with a caller-provided `eps`.
    pub fn q_sample_with<F: Real>(&self, x0: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Result<Tensor<F>> {
        self.check(t, 1)?;
        let (a, b) = (F::lit(self.alpha_bar[t].sqrt()), F::lit((1.0 - self.alpha_bar[t]).sqrt()));
        x0.axpby(a, eps, b)
    }

    /// Forward corruption with `eps ~ N(0, I)` drawn from `seed`; returns `(x_t, eps)`.
    pub fn q_sample<F: Real>(&self, x0: &Tensor<F>, t: usize, seed: u64) -> Result<(Tensor<F>, Tensor<F>)> {
        let eps = rng::normal(&mut rng::stream(seed), x0.shape());
        Ok((self.q_sample_with(x0, t, &eps)?, eps))
    }

    /// Noise implied by a clean-latent prediction.
    pub fn eps_from_x0(&self, x_t: f64, x0: f64, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        (x_t - ab.sqrt() * x0) / (1.0 - ab).sqrt()
    }

    pub fn x0_from_eps(&self, x_t: f64, eps: f64, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        (x_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()
    }

    /// Posterior `q(x_prev | x_t, x0)` for the stride `t -> t_prev`, as
    /// `(coef_x0, coef_xt, variance)`.
    pub fn posterior(&self, t: usize, t_prev: usize) -> Result<(f64, f64, f64)> {
        self.check(t, 1)?;
        if t_prev >= t {
            return Err(invalid(format!("reverse step needs t_prev < t, got {t_prev} >= {t}")));
        }
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coef_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        Ok((coef_x0, coef_xt, var))
    }

    /// One ancestral step. `z` is the standard normal draw; it is ignored
    /// when `t_prev == 0`.
    pub fn reverse_step<F: Real>(
        &self,
        x_t: &Tensor<F>,
        t: usize,
        t_prev: usize,
        x0_hat: &Tensor<F>,
        z: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let (cx0, cxt, var) = self.posterior(t, t_prev)?;
        if x_t.shape() != x0_hat.shape() {
            return Err(Error::Shape { op: "reverse_step", lhs: x_t.shape().to_vec(), rhs: x0_hat.shape().to_vec() });
        }
        let mean = x0_hat.axpby(F::lit(cx0), x_t, F::lit(cxt))?;
        match z {
            Some(z) if t_prev > 0 => mean.axpby(F::one(), z, F::lit(var.sqrt())),
            _ => Ok(mean),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `w * cond + (1 - w) * uncond`.
pub fn cfg_combine(cond: f64, uncond: f64, w: f64) -> f64 {
    w * cond + (1.0 - w) * uncond
}

/// Visited steps `T, T-s, ...` (all positive) followed by the endpoint 0.
pub fn step_sequence(steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > steps {
        return Err(invalid(format!("stride must be in 1..={steps}, got {stride}")));
    }
    let mut seq: Vec<usize> = (0..).map(|k| steps as i64 - (k * stride) as i64).take_while(|&t| t > 0).map(|t| t as usize).collect();
    seq.push(0);
    Ok(seq)
}
