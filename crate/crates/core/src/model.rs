//! The full captioner: text codec, audio encoder and denoiser over one parameter store.

use rand::Rng;

use crate::audio::{AudioEncoder, AudioEncoderConfig, MelSpec};
use crate::config::{kv, parse_value};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::numerics::{ParamStore, Real, Tensor};
use crate::text::{CodecConfig, TextCodec};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta1: 1e-4, beta_t: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta1, self.beta_t)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub audio: AudioEncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    /// Minimal sizes for smoke runs and tests: width 16, 2 heads, 2 blocks,
    /// 24 positions, 100 diffusion steps.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        for (k, v) in [
            ("width", "16"),
            ("heads", "2"),
            ("blocks", "2"),
            ("max_len", "24"),
            ("time_embed_dim", "8"),
            ("transition_layers", "1"),
            ("audio_hidden", "16"),
            ("audio_layers", "1"),
            ("steps", "100"),
        ] {
            c.set(k, v).expect("preset keys are valid");
        }
        c
    }

    /// Flat keys understood by [`ModelConfig::set`].
    pub const KEYS: [&'static str; 14] = [
        "variant",
        "width",
        "heads",
        "blocks",
        "max_len",
        "time_embed_dim",
        "mlp_ratio",
        "sigma0",
        "transition_layers",
        "audio_hidden",
        "audio_layers",
        "steps",
        "beta1",
        "beta_t",
    ];

    /// Applies one flat setting; shared sizes are written to every component.
    /// Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => self.denoiser.variant = value.parse()?,
            "width" => {
                let d = parse_value(key, value)?;
                self.codec.embed_dim = d;
                self.audio.out_dim = d;
                self.denoiser.width = d;
            }
            "heads" => {
                let h = parse_value(key, value)?;
                self.codec.heads = h;
                self.audio.heads = h;
                self.denoiser.heads = h;
            }
            "blocks" => self.denoiser.blocks = parse_value(key, value)?,
            "max_len" => {
                let l = parse_value(key, value)?;
                self.codec.max_len = l;
                self.denoiser.max_len = l;
            }
            "time_embed_dim" => self.denoiser.time_embed_dim = parse_value(key, value)?,
            "mlp_ratio" => {
                let r = parse_value(key, value)?;
                self.codec.mlp_ratio = r;
                self.audio.mlp_ratio = r;
                self.denoiser.mlp_ratio = r;
            }
            "sigma0" => self.codec.sigma0 = parse_value(key, value)?,
            "transition_layers" => self.codec.transition_layers = parse_value(key, value)?,
            "audio_hidden" => self.audio.hidden = parse_value(key, value)?,
            "audio_layers" => self.audio.layers = parse_value(key, value)?,
            "steps" => {
                let t = parse_value(key, value)?;
                self.schedule.steps = t;
                self.denoiser.max_step = t;
            }
            "beta1" => self.schedule.beta1 = parse_value(key, value)?,
            "beta_t" => self.schedule.beta_t = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            kv("variant", self.denoiser.variant),
            kv("width", self.denoiser.width),
            kv("heads", self.denoiser.heads),
            kv("blocks", self.denoiser.blocks),
            kv("max_len", self.denoiser.max_len),
            kv("time_embed_dim", self.denoiser.time_embed_dim),
            kv("mlp_ratio", self.denoiser.mlp_ratio),
            kv("sigma0", self.codec.sigma0),
            kv("transition_layers", self.codec.transition_layers),
            kv("audio_hidden", self.audio.hidden),
            kv("audio_layers", self.audio.layers),
            kv("steps", self.schedule.steps),
            kv("beta1", self.schedule.beta1),
            kv("beta_t", self.schedule.beta_t),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        if self.schedule.steps != self.denoiser.max_step {
            return Err(invalid("schedule steps and denoiser step range disagree"));
        }
        if self.codec.heads != self.denoiser.heads || self.codec.mlp_ratio != self.denoiser.mlp_ratio {
            return Err(invalid("codec and denoiser head/mlp settings disagree"));
        }
        self.codec.validate()?;
        self.audio.validate()?;
        self.denoiser.validate()?;
        let d = self.denoiser.width;
        if self.codec.embed_dim != d || self.audio.out_dim != d {
            return Err(invalid(format!(
                "widths disagree: codec {}, audio projection {}, denoiser {d}",
                self.codec.embed_dim, self.audio.out_dim
            )));
        }
        if self.codec.max_len != self.denoiser.max_len {
            return Err(invalid("codec and denoiser max_len disagree"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub codec: TextCodec,
    pub audio: AudioEncoder,
    pub denoiser: Denoiser,
}

impl Model {
    /// Registers all parameters in `store`, drawing initial values from `rng`.
    pub fn new<F: Real>(cfg: ModelConfig, vocab_size: usize, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let codec = TextCodec::new(cfg.codec.clone(), vocab_size, store, rng)?;
        let audio = AudioEncoder::new(cfg.audio.clone(), store, rng)?;
        let denoiser = Denoiser::new(cfg.denoiser.clone(), store, rng)?;
        Ok(Self { cfg, codec, audio, denoiser })
    }

    pub fn max_len(&self) -> usize {
        self.cfg.denoiser.max_len
    }

    pub fn width(&self) -> usize {
        self.cfg.denoiser.width
    }

    /// Conditioning features for each clip.
    pub fn audio_features<F: Real>(&self, store: &ParamStore<F>, specs: &[&MelSpec]) -> Result<Vec<Tensor<F>>> {
        if specs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = crate::Graph::new();
        let (v, m) = self.audio.features(&mut g, store, specs)?;
        let t = g.value(v);
        Ok((0..specs.len()).map(|b| t.slice_rows(b * m, m)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("variant", "uvit").unwrap());
        assert!(cfg.set("width", "64").unwrap());
        assert!(!cfg.set("lr", "0.1").unwrap());
        cfg.validate().unwrap();
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_kv() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_kv().len(), ModelConfig::KEYS.len());
        assert!(cfg.set("width", "wide").is_err());
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.audio.out_dim = 64;
        assert!(cfg.validate().is_err());
    }
}
