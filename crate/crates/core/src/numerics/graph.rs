//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every forward op appends a node holding its value plus whatever it needs
//! for the backward sweep. Values are checked for finiteness as they are
//! produced, so a divergence is reported against the op that caused it.

use std::collections::HashMap;

use super::real::{gemm, View, ViewMut};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges of one attention problem inside batched query and key/value matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

impl AttnGroup {
    /// Groups for `count` independent problems with fixed query/key lengths.
    pub fn uniform(count: usize, q_len: usize, kv_len: usize) -> Vec<Self> {
        (0..count)
            .map(|i| Self { q_start: i * q_len, q_len, kv_start: i * kv_len, kv_len })
            .collect()
    }

    /// Groups where each query block of `q_len` rows attends to its own key range.
    pub fn ragged(q_len: usize, kv_lens: &[usize]) -> Vec<Self> {
        let mut kv_start = 0;
        kv_lens
            .iter()
            .enumerate()
            .map(|(i, &kv_len)| {
                let g = Self { q_start: i * q_len, q_len, kv_start, kv_len };
                kv_start += kv_len;
                g
            })
            .collect()
    }
}

/// Geometry of a batched 2-D convolution; input `[batch, c_in, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn spatial_out(&self) -> usize {
        self.h_out() * self.w_out()
    }
}

enum Op<F> {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleRows(Var, Vec<F>),
    AddRow(Var, Var),
    AddGroupRows(Var, Var, usize),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<F>, rstd: Vec<F> },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: Vec<AttnGroup>, probs: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<F> },
    ChannelsToFrames { x: Var, geom: [usize; 4] },
    Sum(Var),
    WeightedSqErr { pred: Var, target: Var, weights: Vec<F> },
    WeightedXent { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    WeightedBce { logits: Var, targets: Vec<F>, weights: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Tape of recorded operations.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name, node: self.nodes.len() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// Records a constant.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push("input", t, Op::Input)
    }

    /// Records a parameter; repeated lookups of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Param)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul")?;
        let (k2, m) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); n * m];
        gemm(
            View::dense(self.value(a).data(), n, k),
            View::dense(self.value(b).data(), k, m),
            F::zero(),
            ViewMut::dense(&mut out, n, m),
        );
        self.push("matmul", Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push("scale", t, Op::Scale(a, c))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<F>) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != factors.len() {
            return Err(shape_err("scale_rows", ta.shape(), &[factors.len()]));
        }
        let c = ta.cols();
        let mut t = ta.clone();
        for (r, &f) in factors.iter().enumerate() {
            t.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|x| *x *= f);
        }
        self.push("scale_rows", t, Op::ScaleRows(a, factors))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.numel() != c {
            return Err(shape_err("add_row", ta.shape(), tb.shape()));
        }
        let mut t = ta.clone();
        for row in t.data_mut().chunks_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(x, &y)| *x += y);
        }
        self.push("add_row", t, Op::AddRow(a, b))
    }

    /// Adds row `i` of `b` to rows `[i*group, (i+1)*group)` of `a`.
    pub fn add_group_rows(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.cols() != c || tb.rows() * group != ta.rows() {
            return Err(shape_err("add_group_rows", ta.shape(), tb.shape()));
        }
        let mut t = ta.clone();
        for (r, row) in t.data_mut().chunks_mut(c).enumerate() {
            row.iter_mut().zip(tb.row(r / group)).for_each(|(x, &y)| *x += y);
        }
        self.push("add_group_rows", t, Op::AddGroupRows(a, b, group))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(F::zero()));
        self.push("relu", t, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| gelu_fwd(x).0);
        self.push("gelu", t, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", t, Op::Silu(a))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        let c = t.cols();
        if c > 0 {
            for row in t.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        self.push("softmax", t, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(shape_err("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut out = vec![F::zero(); tx.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let df = F::lit(d as f64);
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = g[j] * (row[j] - mu) * rs + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, mean, rstd })
    }

    /// Multi-head scaled dot-product attention over independent row groups.
    ///
    /// `q` is `Nq×D`, `k` and `v` are `Nk×D`; each group attends its query rows
    /// to its key rows. Heads split `D` into equal contiguous column blocks and
    /// the outputs are written back into the same blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Vec<AttnGroup>) -> Result<Var> {
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        if self.shape(v) != [nk, dk] || dk != d || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        for g in &groups {
            if g.kv_len == 0 {
                return Err(Error::EmptyConditioning);
            }
            if g.q_start + g.q_len > nq || g.kv_start + g.kv_len > nk {
                return Err(shape_err("attention", &[g.q_start, g.q_len], &[g.kv_start, g.kv_len]));
            }
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let total: usize = groups.iter().map(|g| heads * g.q_len * g.kv_len).sum();
        let mut probs = vec![F::zero(); total];
        let mut out = vec![F::zero(); nq * d];
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut off = 0;
        for g in &groups {
            let block = g.q_len * g.kv_len;
            for h in 0..heads {
                let p = &mut probs[off..off + block];
                gemm(
                    View::block(tq, d, g.q_start, g.q_len, h * dh, dh),
                    View::block(tk, d, g.kv_start, g.kv_len, h * dh, dh).t(),
                    F::zero(),
                    ViewMut::dense(p, g.q_len, g.kv_len),
                );
                for row in p.chunks_mut(g.kv_len) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                gemm(
                    View::dense(p, g.q_len, g.kv_len),
                    View::block(tv, d, g.kv_start, g.kv_len, h * dh, dh),
                    F::zero(),
                    ViewMut::block(&mut out, d, g.q_start, g.q_len, h * dh, dh),
                );
                off += block;
            }
        }
        let t = Tensor::from_parts(vec![nq, d], out);
        self.push("attention", t, Op::Attention { q, k, v, heads, groups, probs })
    }

    /// Row lookup into a `V×D` table.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Invalid(format!("embedding id {bad} out of range for vocabulary {vocab}")));
        }
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        self.push("embedding", t, Op::Embedding { table, ids })
    }

    /// Selects rows of `src` by index; indices may repeat.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let ts = self.value(src);
        let (n, c) = (ts.rows(), ts.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!("row {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(ts.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], out);
        self.push("gather_rows", t, Op::GatherRows { src, idx })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta.shape(), tb.shape()));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..ta.rows() {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let t = Tensor::from_parts(vec![ta.rows(), ca + cb], out);
        self.push("concat_cols", t, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()))
    }

    /// Batched 2-D convolution. `x` is `[batch, c_in, h, w]`, `w` is
    /// `[c_out, c_in*k*k]`, `b` is `[c_out]`; output is `[batch, c_out, h', w']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || stride == 0 || kernel == 0 || xs[2] + 2 * pad < kernel || xs[3] + 2 * pad < kernel {
            return Err(shape_err("conv2d", &xs, self.shape(w)));
        }
        let c_out = self.shape(w)[0];
        let geom = ConvGeom { batch: xs[0], c_in: xs[1], h: xs[2], w: xs[3], c_out, kernel, stride, pad };
        if self.shape(w) != [c_out, geom.patch()] || self.value(b).numel() != c_out {
            return Err(shape_err("conv2d", &xs, self.shape(w)));
        }
        let (patch, sp) = (geom.patch(), geom.spatial_out());
        let mut cols = vec![F::zero(); geom.batch * patch * sp];
        let mut out = vec![F::zero(); geom.batch * c_out * sp];
        let (tx, tw, tb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let in_sz = geom.c_in * geom.h * geom.w;
        for bi in 0..geom.batch {
            let col = &mut cols[bi * patch * sp..(bi + 1) * patch * sp];
            im2col(&geom, &tx[bi * in_sz..(bi + 1) * in_sz], col);
            let o = &mut out[bi * c_out * sp..(bi + 1) * c_out * sp];
            for (co, row) in o.chunks_mut(sp).enumerate() {
                row.iter_mut().for_each(|v| *v = tb[co]);
            }
            gemm(View::dense(tw, c_out, patch), View::dense(col, patch, sp), F::one(), ViewMut::dense(o, c_out, sp));
        }
        let t = Tensor::from_parts(vec![geom.batch, c_out, geom.h_out(), geom.w_out()], out);
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, cols })
    }

    /// `[B, C, H, W]` to `[B*H, C*W]`: one row per (item, time step).
    pub fn channels_to_frames(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("channels_to_frames", &s, &[]));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tx = self.value(x).data();
        let mut out = vec![F::zero(); tx.len()];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    let src = ((bi * c + ci) * h + hi) * w;
                    let dst = (bi * h + hi) * c * w + ci * w;
                    out[dst..dst + w].copy_from_slice(&tx[src..src + w]);
                }
            }
        }
        let t = Tensor::from_parts(vec![b * h, c * w], out);
        self.push("channels_to_frames", t, Op::ChannelsToFrames { x, geom: [b, c, h, w] })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::lit(n as f64))
    }

    /// `sum_r weights[r] * ||pred_r - target_r||^2`.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Var, weights: Vec<F>) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() || tp.rows() != weights.len() {
            return Err(shape_err("weighted_sq_err", tp.shape(), tt.shape()));
        }
        let mut total = F::zero();
        for (r, &w) in weights.iter().enumerate() {
            if w == F::zero() {
                continue;
            }
            let s: F = tp.row(r).iter().zip(tt.row(r)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            total += w * s;
        }
        self.push("weighted_sq_err", Tensor::scalar(total), Op::WeightedSqErr { pred, target, weights })
    }

    /// `sum_r weights[r] * -log softmax(logits_r)[targets[r]]`.
    pub fn weighted_xent(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<F>) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.cols());
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("weighted_xent", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Invalid(format!("target {bad} out of range for {v} classes")));
        }
        let mut probs = tl.data().to_vec();
        let mut total = F::zero();
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let lse = log_sum_exp(row);
            let nll = lse - row[targets[r]];
            total += weights[r] * nll;
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        self.push("weighted_xent", Tensor::scalar(total), Op::WeightedXent { logits, targets, weights, probs })
    }

    /// Binary cross-entropy with logits: `sum_r weights[r] * (softplus(l) - y*l)`.
    pub fn weighted_bce(&mut self, logits: Var, targets: Vec<F>, weights: Vec<F>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() || weights.len() != targets.len() {
            return Err(shape_err("weighted_bce", tl.shape(), &[targets.len()]));
        }
        let total = tl
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&l, &y), &w)| w * (softplus(l) - y * l))
            .sum();
        self.push("weighted_bce", Tensor::scalar(total), Op::WeightedBce { logits, targets, weights })
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            self.backprop(i, &up, &mut grads);
            grads[i] = Some(up);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into the store's gradient buffers.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.gradients(loss)?;
        grads.accumulate_into(self, store);
        Ok(())
    }

    fn backprop(&self, i: usize, up: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let m = self.value(*b).shape()[1];
                let ga = acc(grads, *a, n * k);
                gemm(
                    View::dense(up, n, m),
                    View::dense(self.value(*b).data(), k, m).t(),
                    F::one(),
                    ViewMut::dense(ga, n, k),
                );
                let gb = acc(grads, *b, k * m);
                gemm(
                    View::dense(self.value(*a).data(), n, k).t(),
                    View::dense(up, n, m),
                    F::one(),
                    ViewMut::dense(gb, k, m),
                );
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, up.len()), up);
                add_into(acc(grads, *b, up.len()), up);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, up.len()), up);
                acc(grads, *b, up.len()).iter_mut().zip(up).for_each(|(g, &u)| *g -= u);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, up.len()).iter_mut().zip(up.iter().zip(vb)).for_each(|(g, (&u, &y))| *g += u * y);
                acc(grads, *b, up.len()).iter_mut().zip(up.iter().zip(va)).for_each(|(g, (&u, &x))| *g += u * x);
            }
            Op::Scale(a, c) => {
                acc(grads, *a, up.len()).iter_mut().zip(up).for_each(|(g, &u)| *g += u * *c);
            }
            Op::ScaleRows(a, f) => {
                let c = node.value.cols();
                let ga = acc(grads, *a, up.len());
                for (r, &s) in f.iter().enumerate() {
                    for j in r * c..(r + 1) * c {
                        ga[j] += up[j] * s;
                    }
                }
            }
            Op::AddRow(a, b) => {
                add_into(acc(grads, *a, up.len()), up);
                let c = node.value.cols();
                let gb = acc(grads, *b, c);
                for row in up.chunks(c) {
                    add_into(gb, row);
                }
            }
            Op::AddGroupRows(a, b, group) => {
                add_into(acc(grads, *a, up.len()), up);
                let c = node.value.cols();
                let gb = acc(grads, *b, self.value(*b).numel());
                for (r, row) in up.chunks(c).enumerate() {
                    let dst = &mut gb[(r / group) * c..(r / group + 1) * c];
                    add_into(dst, row);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, up.len()).iter_mut().zip(up.iter().zip(x)).for_each(|(g, (&u, &x))| {
                    if x > F::zero() {
                        *g += u;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, up.len())
                    .iter_mut()
                    .zip(up.iter().zip(x))
                    .for_each(|(g, (&u, &x))| *g += u * gelu_fwd(x).1);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, up.len()).iter_mut().zip(up.iter().zip(x)).for_each(|(g, (&u, &x))| {
                    let s = sigmoid(x);
                    *g += u * s * (F::one() + x * (F::one() - s));
                });
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                let ga = acc(grads, *a, up.len());
                for ((gr, ur), yr) in ga.chunks_mut(c).zip(up.chunks(c)).zip(y.chunks(c)) {
                    let dot: F = ur.iter().zip(yr).map(|(&u, &y)| u * y).sum();
                    for j in 0..c {
                        gr[j] += yr[j] * (ur[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let d = node.value.cols();
                let xv = self.value(*x).data();
                let g = self.value(*gain).data().to_vec();
                let df = F::lit(d as f64);
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                let mut dx = vec![F::zero(); xv.len()];
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for r in 0..mean.len() {
                    let (xr, ur) = (&xv[r * d..(r + 1) * d], &up[r * d..(r + 1) * d]);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dxhat[j] = ur[j] * g[j];
                        dgain[j] += ur[j] * xhat[j];
                        dbias[j] += ur[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<F>() / df;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / df;
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                add_into(acc(grads, *x, xv.len()), &dx);
                add_into(acc(grads, *gain, d), &dgain);
                add_into(acc(grads, *bias, d), &dbias);
            }
            Op::Attention { q, k, v, heads, groups, probs } => {
                self.attention_backward(up, grads, (*q, *k, *v), *heads, groups, probs);
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                let n = self.value(*table).numel();
                let gt = acc(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &up[r * d..(r + 1) * d]);
                }
            }
            Op::GatherRows { src, idx } => {
                let c = node.value.cols();
                let n = self.value(*src).numel();
                let gs = acc(grads, *src, n);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gs[i * c..(i + 1) * c], &up[r * c..(r + 1) * c]);
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = node.value.rows();
                {
                    let ga = acc(grads, *a, rows * ca);
                    for r in 0..rows {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &up[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                }
                let gb = acc(grads, *b, rows * cb);
                for r in 0..rows {
                    add_into(&mut gb[r * cb..(r + 1) * cb], &up[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    add_into(acc(grads, *p, n), &up[off..off + n]);
                    off += n;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, sp, c_out) = (geom.patch(), geom.spatial_out(), geom.c_out);
                let in_sz = geom.c_in * geom.h * geom.w;
                let wv = self.value(*w).data().to_vec();
                let mut dw = vec![F::zero(); c_out * patch];
                let mut db = vec![F::zero(); c_out];
                let mut dx = vec![F::zero(); geom.batch * in_sz];
                let mut dcol = vec![F::zero(); patch * sp];
                for bi in 0..geom.batch {
                    let ub = &up[bi * c_out * sp..(bi + 1) * c_out * sp];
                    let col = &cols[bi * patch * sp..(bi + 1) * patch * sp];
                    for (co, row) in ub.chunks(sp).enumerate() {
                        db[co] += row.iter().copied().sum::<F>();
                    }
                    gemm(
                        View::dense(ub, c_out, sp),
                        View::dense(col, patch, sp).t(),
                        F::one(),
                        ViewMut::dense(&mut dw, c_out, patch),
                    );
                    gemm(
                        View::dense(&wv, c_out, patch).t(),
                        View::dense(ub, c_out, sp),
                        F::zero(),
                        ViewMut::dense(&mut dcol, patch, sp),
                    );
                    col2im(geom, &dcol, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                }
                add_into(acc(grads, *x, dx.len()), &dx);
                add_into(acc(grads, *w, dw.len()), &dw);
                add_into(acc(grads, *b, c_out), &db);
            }
            Op::ChannelsToFrames { x, geom } => {
                let [b, c, h, w] = *geom;
                let gx = acc(grads, *x, up.len());
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            let src = ((bi * c + ci) * h + hi) * w;
                            let dst = (bi * h + hi) * c * w + ci * w;
                            add_into(&mut gx[src..src + w], &up[dst..dst + w]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let u = up[0];
                let n = self.value(*a).numel();
                acc(grads, *a, n).iter_mut().for_each(|g| *g += u);
            }
            Op::WeightedSqErr { pred, target, weights } => {
                let u = up[0];
                let (p, t) = (self.value(*pred), self.value(*target));
                let c = p.cols();
                let mut d = vec![F::zero(); p.numel()];
                for (((dr, pr), tr), &w) in d.chunks_mut(c).zip(p.data().chunks(c)).zip(t.data().chunks(c)).zip(weights.iter()) {
                    for ((dj, &pj), &tj) in dr.iter_mut().zip(pr).zip(tr) {
                        *dj = F::lit(2.0) * w * u * (pj - tj);
                    }
                }
                add_into(acc(grads, *pred, d.len()), &d);
                acc(grads, *target, d.len()).iter_mut().zip(&d).for_each(|(g, &x)| *g -= x);
            }
            Op::WeightedXent { logits, targets, weights, probs } => {
                let u = up[0];
                let v = self.value(*logits).cols();
                let gl = acc(grads, *logits, probs.len());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &probs[r * v..(r + 1) * v];
                    let g = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        g[j] += u * w * (row[j] - onehot);
                    }
                }
            }
            Op::WeightedBce { logits, targets, weights } => {
                let u = up[0];
                let l = self.value(*logits).data();
                let gl = acc(grads, *logits, l.len());
                for j in 0..l.len() {
                    gl[j] += u * weights[j] * (sigmoid(l[j]) - targets[j]);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        up: &[F],
        grads: &mut [Option<Vec<F>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        groups: &[AttnGroup],
        probs: &[F],
    ) {
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut dq = vec![F::zero(); tq.len()];
        let mut dk = vec![F::zero(); tk.len()];
        let mut dv = vec![F::zero(); tv.len()];
        let mut dp = Vec::new();
        let mut off = 0;
        for g in groups {
            let block = g.q_len * g.kv_len;
            dp.resize(block, F::zero());
            for h in 0..heads {
                let p = &probs[off..off + block];
                gemm(
                    View::dense(p, g.q_len, g.kv_len).t(),
                    View::block(up, d, g.q_start, g.q_len, h * dh, dh),
                    F::one(),
                    ViewMut::block(&mut dv, d, g.kv_start, g.kv_len, h * dh, dh),
                );
                gemm(
                    View::block(up, d, g.q_start, g.q_len, h * dh, dh),
                    View::block(tv, d, g.kv_start, g.kv_len, h * dh, dh).t(),
                    F::zero(),
                    ViewMut::dense(&mut dp, g.q_len, g.kv_len),
                );
                for (dr, pr) in dp.chunks_mut(g.kv_len).zip(p.chunks(g.kv_len)) {
                    let dot: F = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for j in 0..g.kv_len {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(
                    View::dense(&dp, g.q_len, g.kv_len),
                    View::block(tk, d, g.kv_start, g.kv_len, h * dh, dh),
                    F::one(),
                    ViewMut::block(&mut dq, d, g.q_start, g.q_len, h * dh, dh),
                );
                gemm(
                    View::dense(&dp, g.q_len, g.kv_len).t(),
                    View::block(tq, d, g.q_start, g.q_len, h * dh, dh),
                    F::one(),
                    ViewMut::block(&mut dk, d, g.kv_start, g.kv_len, h * dh, dh),
                );
                off += block;
            }
        }
        add_into(acc(grads, q, dq.len()), &dq);
        add_into(acc(grads, k, dk.len()), &dk);
        add_into(acc(grads, v, dv.len()), &dv);
    }
}

/// Per-node gradients produced by [`Graph::gradients`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn accumulate_into(&self, graph: &Graph<F>, store: &mut ParamStore<F>) {
        for (&id, &var) in &graph.params {
            if let Some(g) = self.get(var) {
                store.accumulate(id, g);
            }
        }
    }
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Returns (gelu(x), gelu'(x)).
fn gelu_fwd<F: Real>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044715);
    let two = F::lit(2.0);
    // 0.5 (1 + tanh u) == sigmoid(2u), which needs a single exp.
    let s = sigmoid(two * c * (x + a * x * x * x));
    let y = x * s;
    let dy = s + x * s * (F::one() - s) * two * c * (F::one() + F::lit(3.0) * a * x * x);
    (y, dy)
}

pub(crate) fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.kernel);
    let sp = ho * wo;
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * sp;
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        cols[row + oh * wo + ow] =
                            if ih >= 0 && (ih as usize) < g.h && iw >= 0 && (iw as usize) < g.w {
                                x[(c * g.h + ih as usize) * g.w + iw as usize]
                            } else {
                                F::zero()
                            };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.kernel);
    let sp = ho * wo;
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * sp;
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dx[(c * g.h + ih as usize) * g.w + iw as usize] += cols[row + oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}
