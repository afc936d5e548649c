//! Tensor arithmetic with reverse-mode gradient accumulation.

mod graph;
mod params;
mod real;
mod tensor;

pub use graph::{AttnGroup, ConvGeom, Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Matrix product `a × b`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    a.matmul(b)
}

/// Softmax over the last axis.
pub fn softmax<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let v = g.input(x.clone())?;
    let y = g.softmax(v)?;
    Ok(g.value(y).clone())
}

/// Row-wise layer normalization with affine gain and bias.
pub fn layer_norm<F: Real>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.input(x.clone())?, g.input(gain.clone())?, g.input(bias.clone())?);
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

/// Mean negative log-likelihood of `targets` over positions where `mask` is set.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> Result<F> {
    let weights = mask_weights(mask)?;
    let mut g = Graph::new();
    let l = g.input(logits.clone())?;
    let loss = g.weighted_xent(l, targets.to_vec(), weights)?;
    Ok(g.value(loss).item())
}

/// `1/count` on masked rows, zero elsewhere.
pub fn mask_weights<F: Real>(mask: &[bool]) -> Result<Vec<F>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::NoValidPositions);
    }
    let w = F::one() / F::lit(count as f64);
    Ok(mask.iter().map(|&m| if m { w } else { F::zero() }).collect())
}
