//! Parameterized layers shared by the codec, audio encoder and denoiser.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{AttnGroup, Graph, ParamId, ParamStore, Real, Tensor, Var, LN_EPS};

pub(crate) fn normal_tensor<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(std * rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `y = x W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights drawn from `N(0, gain^2 / fan_in)`, zero bias.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.insert(format!("{name}.w"), normal_tensor(&[fan_in, fan_out], std, rng))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Layer normalization with learned gain (`.w`) and bias (`.b`).
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.w"), Tensor::full(&[dim], F::one()))?;
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias, F::lit(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, 1.0, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, 0.5, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, 0.5, rng)?,
            heads,
        })
    }

    /// Queries from `x`, keys and values from `context`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        context: Var,
        groups: Vec<AttnGroup>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let a = g.attention(q, k, v, self.heads, groups)?;
        self.o.forward(g, store, a)
    }
}

/// Pre-norm self-attention + MLP layer with residuals.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, rng)?,
        })
    }

    /// `x` holds `batch` sequences of `seq` rows each.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, AttnGroup::uniform(batch, seq, seq))?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// Interleaved sinusoidal features: `[sin(p f_0), cos(p f_0), sin(p f_1), ...]`
/// with `f_i = 10000^(-2i/dim)`.
pub fn sinusoid<F: Real>(position: f64, dim: usize) -> Vec<F> {
    (0..dim)
        .map(|j| {
            let i = j / 2;
            let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            let a = position * freq;
            F::lit(if j % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect()
}
