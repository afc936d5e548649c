//! Trainable audio encoder and the projection into the denoiser width.

use rand::Rng;

use super::mel::MelSpec;
use crate::error::{invalid, Error, Result};
use crate::nn::{normal_tensor, sinusoid, EncoderLayer, Linear, Norm};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Fixed affine applied to log-mel cells before the first convolution.
const MEL_SHIFT: f64 = 5.0;
const MEL_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoderConfig {
    pub bands: usize,
    pub hidden: usize,
    /// Output width of the projection, the denoiser width.
    pub out_dim: usize,
    pub conv_channels: [usize; 2],
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self { bands: 64, hidden: 128, out_dim: 128, conv_channels: [8, 16], layers: 2, heads: 4, mlp_ratio: 2 }
    }
}

impl AudioEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands < 4 || self.hidden == 0 || self.out_dim == 0 {
            return Err(invalid("audio encoder dimensions must be positive"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!("audio hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        Ok(())
    }

    /// Output rows for `frames` input frames: two stride-2 convolutions.
    pub fn frames_out(&self, frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }

    fn feature_width(&self) -> usize {
        self.conv_channels[1] * self.bands.div_ceil(2).div_ceil(2)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    const KERNEL: usize = 3;

    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let patch = c_in * Self::KERNEL * Self::KERNEL;
        let w = store.insert(format!("{name}.w"), normal_tensor(&[c_out, patch], (2.0 / patch as f64).sqrt(), rng))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b })
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.conv2d(x, w, b, Self::KERNEL, 2, 1)?;
        g.gelu(y)
    }
}

/// Strided convolutions over (time, mel), self-attention over time, then
/// the projection `Linear -> LayerNorm` into the conditioning space.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    conv1: Conv,
    conv2: Conv,
    input: Linear,
    layers: Vec<EncoderLayer>,
    norm: Norm,
    pub proj: Linear,
    pub proj_norm: Norm,
}

impl AudioEncoder {
    pub fn new<F: Real>(cfg: AudioEncoderConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2] = cfg.conv_channels;
        let h = cfg.hidden;
        Ok(Self {
            conv1: Conv::new(store, "audio.conv1", 1, c1, rng)?,
            conv2: Conv::new(store, "audio.conv2", c1, c2, rng)?,
            input: Linear::new(store, "audio.input", cfg.feature_width(), h, 1.0, rng)?,
            layers: (0..cfg.layers)
                .map(|i| EncoderLayer::new(store, &format!("audio.layers.{i}"), h, cfg.heads, h * cfg.mlp_ratio, rng))
                .collect::<Result<_>>()?,
            norm: Norm::new(store, "audio.norm", h)?,
            proj: Linear::new(store, "audio.proj", h, cfg.out_dim, 1.0, rng)?,
            proj_norm: Norm::new(store, "audio.proj_norm", cfg.out_dim)?,
            cfg,
        })
    }

    fn check(&self, specs: &[&MelSpec]) -> Result<usize> {
        let first = specs.first().ok_or_else(|| invalid("empty audio batch"))?;
        let frames = first.frame_count();
        for s in specs {
            if s.frame_count() != frames || s.bands() != self.cfg.bands {
                return Err(Error::Shape {
                    op: "encode_audio",
                    lhs: vec![frames, self.cfg.bands],
                    rhs: vec![s.frame_count(), s.bands()],
                });
            }
        }
        if frames == 0 {
            return Err(invalid("mel spectrogram has no frames"));
        }
        Ok(frames)
    }

    /// Encoder output before projection: `(B*M)×H` rows, `M` per item.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, specs: &[&MelSpec]) -> Result<(Var, usize)> {
        let frames = self.check(specs)?;
        let batch = specs.len();
        let mut data = Vec::with_capacity(batch * frames * self.cfg.bands);
        for s in specs {
            data.extend(s.frames.data().iter().map(|&v| F::lit((v as f64 + MEL_SHIFT) * MEL_SCALE)));
        }
        let x = g.input(Tensor::new(vec![batch, 1, frames, self.cfg.bands], data)?)?;
        let x = self.conv1.forward(g, store, x)?;
        let x = self.conv2.forward(g, store, x)?;
        let m = g.shape(x)[2];
        let x = g.channels_to_frames(x)?;
        let x = self.input.forward(g, store, x)?;
        let pos: Vec<F> = (0..batch).flat_map(|_| (0..m).flat_map(|p| sinusoid::<F>(p as f64, self.cfg.hidden))).collect();
        let pos = g.input(Tensor::new(vec![batch * m, self.cfg.hidden], pos)?)?;
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, batch, m)?;
        }
        Ok((self.norm.forward(g, store, x)?, m))
    }

    /// The projection into the denoiser width.
    pub fn project<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, enc: Var) -> Result<Var> {
        let y = self.proj.forward(g, store, enc)?;
        self.proj_norm.forward(g, store, y)
    }

    /// Encode then project: `(B*M)×D` conditioning rows.
    pub fn features<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, specs: &[&MelSpec]) -> Result<(Var, usize)> {
        let (enc, m) = self.encode(g, store, specs)?;
        Ok((self.project(g, store, enc)?, m))
    }

    /// Conditioning features for a single clip, `M×D`.
    pub fn features_of<F: Real>(&self, store: &ParamStore<F>, spec: &MelSpec) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let (v, _) = self.features(&mut g, store, &[spec])?;
        Ok(g.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_spectrogram, Waveform};
    use crate::rng;

    fn setup() -> (AudioEncoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let enc = AudioEncoder::new(AudioEncoderConfig::default(), &mut store, &mut rng::stream(3)).unwrap();
        (enc, store)
    }

    fn tone() -> MelSpec {
        let w = Waveform::new((0..32_000).map(|i| 0.5 * (i as f32 * 0.3).sin()).collect());
        mel_spectrogram(&w).unwrap()
    }

    #[test]
    fn downsamples_by_four() {
        let (enc, store) = setup();
        let spec = tone();
        assert_eq!(spec.frame_count(), 124);
        let f = enc.features_of(&store, &spec).unwrap();
        assert_eq!(f.shape(), &[31, 128]);
        assert_eq!(enc.cfg.frames_out(124), 31);
        assert_eq!(enc.cfg.frames_out(125), 32);
    }

    #[test]
    fn deterministic_and_finite_on_silence() {
        let (enc, store) = setup();
        let silence = mel_spectrogram(&Waveform::silence(32_000)).unwrap();
        let a = enc.features_of(&store, &silence).unwrap();
        let b = enc.features_of(&store, &silence).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn batch_rows_match_single_items() {
        let (enc, store) = setup();
        let (s1, s2) = (tone(), mel_spectrogram(&Waveform::silence(32_000)).unwrap());
        let mut g = Graph::new();
        let (v, m) = enc.features(&mut g, &store, &[&s1, &s2]).unwrap();
        let both = g.value(v);
        let single = enc.features_of(&store, &s2).unwrap();
        assert!(both.slice_rows(m, m).max_abs_diff(&single) < 1e-5);
    }

    #[test]
    fn zero_projection_collapses_to_bias_norm() {
        let (enc, mut store) = setup();
        store.get_mut(enc.proj.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias: Vec<f32> = (0..128).map(|i| (i as f32 * 0.37).sin()).collect();
        store.get_mut(enc.proj.b).data_mut().copy_from_slice(&bias);
        let f = enc.features_of(&store, &tone()).unwrap();
        let (ones, zeros) = (Tensor::full(&[128], 1.0), Tensor::zeros(&[128]));
        let expect = crate::numerics::layer_norm(&Tensor::new(vec![1, 128], bias).unwrap(), &ones, &zeros, 1e-5).unwrap();
        for r in 0..f.rows() {
            for (a, b) in f.row(r).iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gradients_reach_encoder() {
        let (enc, mut store) = setup();
        let mut g = Graph::new();
        let (v, _) = enc.features(&mut g, &store, &[&tone()]).unwrap();
        let loss = g.mean(v).unwrap();
        let sq = g.mul(v, v).unwrap();
        let loss2 = g.mean(sq).unwrap();
        let total = g.add(loss, loss2).unwrap();
        g.backward(total, &mut store).unwrap();
        for id in store.ids() {
            let nonzero = store.grad(id).data().iter().any(|&x| x != 0.0);
            assert!(nonzero, "{} has zero gradient", store.name(id));
        }
    }

    #[test]
    fn rejects_mismatched_batch() {
        let (enc, store) = setup();
        let short = mel_spectrogram(&Waveform::silence(16_000)).unwrap();
        let mut g = Graph::new();
        assert!(enc.features(&mut g, &store, &[&tone(), &short]).is_err());
        assert!(enc.features(&mut g, &store, &[]).is_err());
    }
}
