use rand::Rng;

use super::tokens::TokenSeq;
use super::vocab::EOS;
use crate::error::{invalid, Result};
use crate::nn::{normal_tensor, EncoderLayer, Linear, Norm};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub max_len: usize,
    pub embed_dim: usize,
    /// Standard deviation of the Gaussian added to embeddings.
    pub sigma0: f64,
    /// Self-attention layers between the latent and the heads; 0 means identity.
    pub transition_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { max_len: super::MAX_LEN, embed_dim: 128, sigma0: 0.1, transition_layers: 2, heads: 4, mlp_ratio: 2 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma0.is_nan() || self.sigma0 < 0.0 {
            return Err(invalid(format!("sigma0 must be >= 0, got {}", self.sigma0)));
        }
        if self.embed_dim < 8 {
            return Err(invalid(format!("embed_dim must be >= 8, got {}", self.embed_dim)));
        }
        if self.max_len < 2 {
            return Err(invalid("max_len must be >= 2"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(invalid(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads)));
        }
        Ok(())
    }
}

/// Output of rounding a latent back to tokens.
#[derive(Clone, Debug)]
pub struct Rounded<F = f32> {
    pub tokens: TokenSeq,
    /// `L×V` token logits.
    pub logits: Tensor<F>,
    /// Length-`L` valid-vs-padding logits.
    pub valid_logits: Tensor<F>,
}

/// Embedding table, transition stack, LM head and valid-token head.
#[derive(Clone, Debug)]
pub struct TextCodec {
    pub cfg: CodecConfig,
    pub vocab_size: usize,
    pub embed: ParamId,
    pub transition: Vec<EncoderLayer>,
    pub norm: Norm,
    pub lm_head: Linear,
    pub valid_head: Linear,
}

impl TextCodec {
    pub fn new<F: Real>(cfg: CodecConfig, vocab_size: usize, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab_size < 5 {
            return Err(invalid(format!("vocabulary size must be >= 5, got {vocab_size}")));
        }
        let d = cfg.embed_dim;
        let embed = store.insert("codec.embed.w", normal_tensor(&[vocab_size, d], 1.0, rng))?;
        let transition = (0..cfg.transition_layers)
            .map(|i| EncoderLayer::new(store, &format!("codec.transition.{i}"), d, cfg.heads, d * cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = Norm::new(store, "codec.out_norm", d)?;
        let lm_head = Linear::new(store, "codec.lm_head", d, vocab_size, 1.0, rng)?;
        let valid_head = Linear::new(store, "codec.valid_head", d, 1, 1.0, rng)?;
        Ok(Self { cfg, vocab_size, embed, transition, norm, lm_head, valid_head })
    }

    /// `E(d)` for a batch, stacked to `(B·L)×D`, plus optional additive noise.
    pub fn embed_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        seqs: &[&TokenSeq],
        noise: Option<Tensor<F>>,
    ) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let table = g.param(store, self.embed)?;
        let e = g.embedding(table, ids)?;
        match noise {
            Some(z) => {
                let z = g.input(z.reshape(g.shape(e))?)?;
                g.add(e, z)
            }
            None => Ok(e),
        }
    }

    /// `x0 = E(d) + sigma0 * z`, `z ~ N(0, I)` drawn from `seed`.
    pub fn embed<F: Real>(&self, store: &ParamStore<F>, seq: &TokenSeq, sigma0: f64, seed: u64) -> Result<Tensor<F>> {
        let table = store.get(self.embed);
        let d = table.cols();
        let mut out = Vec::with_capacity(seq.len() * d);
        for &id in &seq.ids {
            if id >= self.vocab_size {
                return Err(invalid(format!("token id {id} out of range")));
            }
            out.extend_from_slice(table.row(id));
        }
        if sigma0 > 0.0 {
            let z = rng::normal::<F>(&mut rng::stream(seed), &[out.len()]);
            let s = F::lit(sigma0);
            out.iter_mut().zip(z.data()).for_each(|(x, &n)| *x += s * n);
        }
        Tensor::new(vec![seq.len(), d], out)
    }

    /// Token logits `(B·L)×V` and valid logits `(B·L)×1` for stacked latents.
    pub fn heads<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x0: Var, batch: usize) -> Result<(Var, Var)> {
        let seq = self.cfg.max_len;
        let mut h = x0;
        for layer in &self.transition {
            h = layer.forward(g, store, h, batch, seq)?;
        }
        let h = self.norm.forward(g, store, h)?;
        let logits = self.lm_head.forward(g, store, h)?;
        let valid = self.valid_head.forward(g, store, h)?;
        Ok((logits, valid))
    }

    /// Rounds a batch of `L×D` latents to token sequences.
    pub fn round_batch<F: Real>(&self, store: &ParamStore<F>, latents: &[&Tensor<F>]) -> Result<Vec<Rounded<F>>> {
        let l = self.cfg.max_len;
        for x in latents {
            if x.shape() != [l, self.cfg.embed_dim] {
                return Err(crate::Error::Shape {
                    op: "round_latent",
                    lhs: x.shape().to_vec(),
                    rhs: vec![l, self.cfg.embed_dim],
                });
            }
        }
        let stacked = Tensor::concat_rows(latents)?;
        let mut g = Graph::new();
        let x = g.input(stacked)?;
        let (logits, valid) = self.heads(&mut g, store, x, latents.len())?;
        let (lt, vt) = (g.value(logits), g.value(valid));
        Ok((0..latents.len())
            .map(|b| {
                let logits = lt.slice_rows(b * l, l);
                let valid_logits = Tensor::from_parts(vec![l], vt.data()[b * l..(b + 1) * l].to_vec());
                let tokens = decode(&logits, valid_logits.data());
                Rounded { tokens, logits, valid_logits }
            })
            .collect())
    }

    pub fn round<F: Real>(&self, store: &ParamStore<F>, x0: &Tensor<F>) -> Result<Rounded<F>> {
        Ok(self.round_batch(store, &[x0])?.remove(0))
    }
}

/// Per-position argmax; the first predicted `EOS` ends the caption. Without
/// any `EOS`, the first position after `BOS` that the valid head scores as
/// padding becomes the terminator.
pub fn decode<F: Real>(logits: &Tensor<F>, valid_logits: &[F]) -> TokenSeq {
    let mut ids: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    if !ids.contains(&EOS) {
        if let Some(p) = (1..ids.len()).find(|&p| valid_logits[p] < F::zero()) {
            ids[p] = EOS;
        }
    }
    TokenSeq::from_predicted(ids)
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
