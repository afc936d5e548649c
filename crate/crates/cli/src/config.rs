//! Run configuration: every tunable in one flat `key=value` namespace.

use std::fmt;
use std::path::{Path, PathBuf};

use diffcap::config::{format_kv, parse_kv, parse_value};
use diffcap::diffusion::step_sequence;
use diffcap::training::TrainConfig;
use diffcap::ModelConfig;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub guidance: f64,
    pub stride: usize,
    pub seed: u64,
    pub num_samples: usize,
    pub sample_batch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub bench_batch: usize,
    pub bench_items: usize,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            guidance: 2.5,
            stride: 60,
            seed: 0,
            num_samples: 1,
            sample_batch: 16,
            n_train: 5000,
            n_val: 250,
            n_test: 500,
            data_seed: 0,
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            checkpoint_every: 1000,
            log_every: 50,
            bench_batch: 16,
            bench_items: 64,
            repeats: 10,
        }
    }
}

const OWN_KEYS: [&str; 17] = [
    "guidance",
    "stride",
    "seed",
    "num_samples",
    "sample_batch",
    "n_train",
    "n_val",
    "n_test",
    "data_seed",
    "data_dir",
    "out_dir",
    "checkpoint",
    "checkpoint_every",
    "log_every",
    "bench_batch",
    "bench_items",
    "repeats",
];

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

impl RunConfig {
    /// All recognised keys.
    pub fn keys() -> Vec<&'static str> {
        let mut keys: Vec<&str> = ModelConfig::KEYS.to_vec();
        keys.extend(TrainConfig::KEYS);
        keys.extend(OWN_KEYS);
        keys
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value;
        let r = (|| -> diffcap::Result<bool> {
            if self.model.set(key, v)? || self.train.set(key, v)? {
                return Ok(true);
            }
            match key {
                "guidance" => self.guidance = parse_value(key, v)?,
                "stride" => self.stride = parse_value(key, v)?,
                "seed" => self.seed = parse_value(key, v)?,
                "num_samples" => self.num_samples = parse_value(key, v)?,
                "sample_batch" => self.sample_batch = parse_value(key, v)?,
                "n_train" => self.n_train = parse_value(key, v)?,
                "n_val" => self.n_val = parse_value(key, v)?,
                "n_test" => self.n_test = parse_value(key, v)?,
                "data_seed" => self.data_seed = parse_value(key, v)?,
                "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
                "log_every" => self.log_every = parse_value(key, v)?,
                "bench_batch" => self.bench_batch = parse_value(key, v)?,
                "bench_items" => self.bench_items = parse_value(key, v)?,
                "repeats" => self.repeats = parse_value(key, v)?,
                _ => return Ok(false),
            }
            Ok(true)
        })()
        .map_err(usage)?;
        if r {
            return Ok(());
        }
        match key {
            "data_dir" => self.data_dir = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            "checkpoint" => self.checkpoint = Some(v.into()),
            _ => return Err(usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> anyhow::Result<()> {
        for (k, v) in parse_kv(text).map_err(usage)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_kv();
        out.extend(self.train.to_kv());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let own: [(&str, String); 17] = [
            ("guidance", self.guidance.to_string()),
            ("stride", self.stride.to_string()),
            ("seed", self.seed.to_string()),
            ("num_samples", self.num_samples.to_string()),
            ("sample_batch", self.sample_batch.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("data_dir", path(&self.data_dir)),
            ("out_dir", path(&self.out_dir)),
            ("checkpoint", path(&self.checkpoint)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("bench_batch", self.bench_batch.to_string()),
            ("bench_items", self.bench_items.to_string()),
            ("repeats", self.repeats.to_string()),
        ];
        out.extend(own.into_iter().filter(|(_, v)| !v.is_empty()).map(|(k, v)| (k.to_string(), v)));
        out
    }

    /// The fully resolved configuration, one `key=value` per line.
    pub fn echo(&self) -> String {
        format_kv(&self.to_kv())
    }

    /// Checks every module precondition; the first violation is reported.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(usage(format!("guidance must be finite and >= 0, got {}", self.guidance)));
        }
        step_sequence(self.model.schedule.steps, self.stride).map_err(usage)?;
        for (name, v) in [
            ("num_samples", self.num_samples),
            ("sample_batch", self.sample_batch),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("bench_batch", self.bench_batch),
            ("repeats", self.repeats),
        ] {
            if v == 0 {
                return Err(usage(format!("{name} must be >= 1")));
            }
        }
        if self.bench_items < 10 {
            return Err(usage("bench_items must be >= 10"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(usage("checkpoint_every and log_every must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("variant=uvit\nblocks=6\nguidance=1.5\ndata_dir=/tmp/x\nlr=0.001\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.data_dir.as_deref(), Some(Path::new("/tmp/x")));
    }

    #[test]
    fn every_key_is_settable_and_echoed() {
        let cfg = RunConfig { data_dir: Some("d".into()), out_dir: Some("o".into()), checkpoint: Some("c".into()), ..Default::default() };
        let echoed: Vec<String> = cfg.to_kv().into_iter().map(|(k, _)| k).collect();
        for k in RunConfig::keys() {
            assert!(echoed.iter().any(|e| e == k), "{k} not echoed");
        }
        assert_eq!(echoed.len(), RunConfig::keys().len());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        for bad in ["nonsense=1", "width=abc", "variant=rnn", "no equals sign"] {
            let err = cfg.apply_text(bad).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{bad}");
        }
    }

    #[test]
    fn validation_reports_first_violation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.stride = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.p_uncond = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("p_uncond"));
        let mut cfg = RunConfig::default();
        cfg.set("heads", "5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
