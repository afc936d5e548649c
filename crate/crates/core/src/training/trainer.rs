use std::fmt;

use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, RngState};
use super::loss::{codec_loss, diffusion_loss, Draws, LossParts, LossWeights};
use super::optim::{lr_at, Adam};
use crate::audio::{MelExtractor, MelSpec, Waveform};
use crate::config::{format_kv, kv, parse_kv, parse_value};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, ParamStore};
use crate::rng::{self, Stream};
use crate::text::{tokenize, TokenSeq, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs of the diffusion stage.
    pub epochs: usize,
    /// Epochs of rounding pretraining before the diffusion stage.
    pub codec_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub codec_lr: f64,
    pub warmup_steps: u64,
    pub weights: LossWeights,
    pub p_uncond: f64,
    pub seed: u64,
    /// Keep updating the embedding table during the diffusion stage.
    pub train_embed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            codec_epochs: 2,
            batch_size: 32,
            lr: 5e-4,
            codec_lr: 1e-3,
            warmup_steps: 200,
            weights: LossWeights::default(),
            p_uncond: 0.1,
            seed: 0,
            train_embed: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: batch 128, lr 1e-4, 200 warmup steps, 80 epochs.
    pub fn full_scale() -> Self {
        Self { epochs: 80, batch_size: 128, lr: 1e-4, ..Self::default() }
    }

    pub const KEYS: [&'static str; 12] = [
        "epochs",
        "codec_epochs",
        "batch_size",
        "lr",
        "codec_lr",
        "warmup_steps",
        "lambda_mse",
        "lambda_ce",
        "lambda_valid",
        "p_uncond",
        "train_seed",
        "train_embed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "codec_epochs" => self.codec_epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "codec_lr" => self.codec_lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "lambda_mse" => self.weights.mse = parse_value(key, value)?,
            "lambda_ce" => self.weights.ce = parse_value(key, value)?,
            "lambda_valid" => self.weights.valid = parse_value(key, value)?,
            "p_uncond" => self.p_uncond = parse_value(key, value)?,
            "train_seed" => self.seed = parse_value(key, value)?,
            "train_embed" => self.train_embed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            kv("epochs", self.epochs),
            kv("codec_epochs", self.codec_epochs),
            kv("batch_size", self.batch_size),
            kv("lr", self.lr),
            kv("codec_lr", self.codec_lr),
            kv("warmup_steps", self.warmup_steps),
            kv("lambda_mse", self.weights.mse),
            kv("lambda_ce", self.weights.ce),
            kv("lambda_valid", self.weights.valid),
            kv("p_uncond", self.p_uncond),
            kv("train_seed", self.seed),
            kv("train_embed", self.train_embed),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(invalid(format!("p_uncond must be in [0, 1], got {}", self.p_uncond)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.codec_lr > 0.0 && self.codec_lr.is_finite()) {
            return Err(invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// One training pair with precomputed features.
#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: TokenSeq,
    pub mel: MelSpec,
}

impl Example {
    pub fn new(caption: &str, wav: &Waveform, vocab: &Vocab, max_len: usize, mel: &MelExtractor) -> Result<Self> {
        Ok(Self { tokens: tokenize(caption, vocab, max_len), mel: mel.compute(wav)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Codec,
    Diffusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Diffusion => "diffusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub parts: LossParts,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.parts;
        write!(
            f,
            "step={} stage={} lr={:.3e} loss={:.6} mse={:.6} ce={:.6} valid={:.6} null={}",
            self.step,
            self.stage.name(),
            self.lr,
            p.total,
            p.mse,
            p.ce,
            p.valid,
            p.null_items
        )
    }
}

/// Counts of items trained with audio and with the null row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConditioningCount {
    pub audio: u64,
    pub null: u64,
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub vocab: Vocab,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
    pub counts: ConditioningCount,
    opt: Adam<f32>,
    rng: Stream,
    step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let sched = model_cfg.schedule.build()?;
        let mut store = ParamStore::new();
        let model = Model::new(model_cfg, vocab.len(), &mut store, &mut rng::stream(rng::mix(cfg.seed, 1)))?;
        let opt = Adam::new(&store);
        let rng = rng::stream(rng::mix(cfg.seed, 2));
        Ok(Self { model, store, vocab, sched, cfg, counts: ConditioningCount::default(), opt, rng, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn codec_steps(&self, n: usize) -> u64 {
        self.cfg.codec_epochs as u64 * self.steps_per_epoch(n)
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.codec_steps(n) + self.cfg.epochs as u64 * self.steps_per_epoch(n)
    }

    /// Item indices of the batch trained at `step`.
    fn batch_indices(&self, n: usize, stage: Stage, stage_step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let (epoch, bi) = (stage_step / spe, (stage_step % spe) as usize);
        let tag = match stage {
            Stage::Codec => 3,
            Stage::Diffusion => 4,
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(rng::mix(rng::mix(self.cfg.seed, tag), epoch)));
        let b = self.cfg.batch_size;
        order[bi * b..((bi + 1) * b).min(n)].to_vec()
    }

    /// Runs one optimizer step on `data`; `None` once the schedule is exhausted.
    pub fn train_step(&mut self, data: &[Example]) -> Result<Option<StepLog>> {
        let n = data.len();
        if n == 0 {
            return Err(invalid("empty training set"));
        }
        if self.step >= self.total_steps(n) {
            return Ok(None);
        }
        let codec_steps = self.codec_steps(n);
        let (stage, stage_step) =
            if self.step < codec_steps { (Stage::Codec, self.step) } else { (Stage::Diffusion, self.step - codec_steps) };
        if stage == Stage::Diffusion && stage_step == 0 {
            self.opt.reset();
        }
        let idx = self.batch_indices(n, stage, stage_step);
        let seqs: Vec<&TokenSeq> = idx.iter().map(|&i| &data[i].tokens).collect();
        let (l, d) = (self.model.max_len(), self.model.width());
        let mut g = Graph::new();
        let (loss, parts, lr, frozen) = match stage {
            Stage::Codec => {
                let noise = rng::normal(&mut self.rng, &[seqs.len() * l, d]);
                let (loss, parts) = codec_loss(&mut g, &self.model, &self.store, &seqs, &noise, self.cfg.weights.valid)?;
                (loss, parts, lr_at(stage_step, self.cfg.codec_lr, self.cfg.warmup_steps), vec![])
            }
            Stage::Diffusion => {
                let mels: Vec<&MelSpec> = idx.iter().map(|&i| &data[i].mel).collect();
                let draws = Draws::sample(&mut self.rng, seqs.len(), l, d, self.sched.steps(), self.cfg.p_uncond);
                let (loss, parts) =
                    diffusion_loss(&mut g, &self.model, &self.store, &self.sched, &seqs, &mels, &draws, self.cfg.weights)?;
                self.counts.null += parts.null_items as u64;
                self.counts.audio += (seqs.len() - parts.null_items) as u64;
                let frozen = if self.cfg.train_embed { vec![] } else { vec![self.model.codec.embed] };
                (loss, parts, lr_at(stage_step, self.cfg.lr, self.cfg.warmup_steps), frozen)
            }
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite { op: "loss", node: self.step as usize });
        }
        g.backward(loss, &mut self.store)?;
        self.opt.step(&mut self.store, lr, &frozen).map_err(|e| match e {
            Error::NonFiniteGradient(name) => Error::NonFiniteGradient(format!("{name} at step {}", self.step)),
            other => other,
        })?;
        let log = StepLog { step: self.step, stage, lr, parts };
        self.step += 1;
        Ok(Some(log))
    }

    /// Trains until `until` steps (or the end of the schedule), calling `on_step` after each.
    pub fn run(&mut self, data: &[Example], until: Option<u64>, mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>) -> Result<()> {
        let stop = until.unwrap_or(u64::MAX).min(self.total_steps(data.len()));
        while self.step < stop {
            match self.train_step(data)? {
                Some(log) => on_step(self, &log)?,
                None => break,
            }
        }
        Ok(())
    }

    fn config_text(&self) -> String {
        let mut pairs = self.model.cfg.to_kv();
        pairs.extend(self.cfg.to_kv());
        pairs.push(kv("vocab", self.vocab.words().join(" ")));
        format_kv(&pairs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::with_capacity(self.store.len() * 3);
        for id in self.store.ids() {
            tensors.push((format!("param.{}", self.store.name(id)), self.store.get(id).clone()));
        }
        for id in self.store.ids() {
            tensors.push((format!("adam.m.{}", self.store.name(id)), self.opt.m[id.index()].clone()));
            tensors.push((format!("adam.v.{}", self.store.name(id)), self.opt.v[id.index()].clone()));
        }
        Checkpoint {
            config: self.config_text(),
            step: self.step,
            opt_step: self.opt.t,
            rng: RngState::capture(&self.rng),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model_cfg, cfg, vocab) = parse_config(&ck.config)?;
        let mut t = Self::new(model_cfg, cfg, vocab)?;
        let ids: Vec<_> = t.store.ids().collect();
        for id in ids {
            let name = t.store.name(id).to_string();
            let load = |prefix: &str| -> Result<&crate::Tensor<f32>> {
                let key = format!("{prefix}{name}");
                let v = ck.tensor(&key).ok_or_else(|| Error::Corrupt(format!("missing tensor {key}")))?;
                if v.shape() != t.store.get(id).shape() {
                    return Err(Error::Corrupt(format!("tensor {key} has shape {:?}, expected {:?}", v.shape(), t.store.get(id).shape())));
                }
                Ok(v)
            };
            let (p, m, v) = (load("param.")?.clone(), load("adam.m.")?.clone(), load("adam.v.")?.clone());
            *t.store.get_mut(id) = p;
            t.opt.m[id.index()] = m;
            t.opt.v[id.index()] = v;
        }
        t.opt.t = ck.opt_step;
        t.rng = ck.rng.restore();
        t.step = ck.step;
        Ok(t)
    }
}

/// Splits a checkpoint config into model settings, training settings and vocabulary.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig, Vocab)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut vocab = None;
    for (k, v) in parse_kv(text)? {
        if k == "vocab" {
            vocab = Some(Vocab::from_words(v.split_whitespace().map(str::to_string).collect())?);
        } else if !model.set(&k, &v)? && !train.set(&k, &v)? {
            return Err(Error::Corrupt(format!("unknown config key {k}")));
        }
    }
    let vocab = vocab.ok_or_else(|| Error::Corrupt("config has no vocabulary".into()))?;
    Ok((model, train, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::synth::build_dataset;

    fn setup(cfg: TrainConfig) -> (Trainer, Vec<Example>) {
        let ds = build_dataset(12, 1, 1, 21).unwrap();
        let captions: Vec<&str> = ds.train.iter().map(|i| i.caption.as_str()).collect();
        let vocab = Vocab::build(&captions).unwrap();
        let mel = MelExtractor::new(MelConfig::default());
        let model_cfg = ModelConfig::tiny();
        let data = ds
            .train
            .iter()
            .map(|i| Example::new(&i.caption, &i.waveform().unwrap(), &vocab, model_cfg.codec.max_len, &mel).unwrap())
            .collect();
        (Trainer::new(model_cfg, cfg, vocab).unwrap(), data)
    }

    fn small() -> TrainConfig {
        TrainConfig { epochs: 3, codec_epochs: 1, batch_size: 4, warmup_steps: 2, seed: 5, ..Default::default() }
    }

    fn params(t: &Trainer) -> Vec<Vec<u32>> {
        t.store.entries().iter().map(|e| e.value.data().iter().map(|x| x.to_bits()).collect()).collect()
    }

    fn steps(t: &mut Trainer, data: &[Example], n: usize) -> Vec<StepLog> {
        (0..n).map(|_| t.train_step(data).unwrap().unwrap()).collect()
    }

    #[test]
    fn resume_reproduces_uninterrupted_trace() {
        let (mut a, data) = setup(small());
        let trace_a = steps(&mut a, &data, 10);
        assert_eq!(trace_a[2].stage, Stage::Codec);
        assert_eq!(trace_a[3].stage, Stage::Diffusion);

        let (mut b, _) = setup(small());
        let mut trace_b = steps(&mut b, &data, 4);
        let bytes = b.checkpoint().to_bytes();
        drop(b);
        let mut c = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        trace_b.extend(steps(&mut c, &data, 6));

        assert_eq!(trace_a, trace_b);
        assert_eq!(params(&a), params(&c));
        assert_eq!(a.checkpoint().to_bytes(), c.checkpoint().to_bytes());
    }

    #[test]
    fn equal_seeds_give_equal_parameters() {
        let (mut a, data) = setup(small());
        let (mut b, _) = setup(small());
        steps(&mut a, &data, 5);
        steps(&mut b, &data, 5);
        assert_eq!(params(&a), params(&b));
        let (mut c, _) = setup(TrainConfig { seed: 6, ..small() });
        steps(&mut c, &data, 5);
        assert_ne!(params(&a), params(&c));
    }

    #[test]
    fn checkpoint_save_load_save_is_identical() {
        let (mut t, data) = setup(small());
        steps(&mut t, &data, 5);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dacc");
        let p2 = dir.path().join("b.dacc");
        t.checkpoint().save(&p1).unwrap();
        let back = Trainer::from_checkpoint(&Checkpoint::load(&p1).unwrap()).unwrap();
        back.checkpoint().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back.cfg, t.cfg);
        assert_eq!(back.model.cfg, t.model.cfg);
        assert_eq!(back.vocab, t.vocab);
    }

    #[test]
    fn condition_dropout_extremes() {
        for (p, expect_null) in [(0.0, false), (1.0, true)] {
            let (mut t, data) = setup(TrainConfig { p_uncond: p, codec_epochs: 0, epochs: 2, ..small() });
            t.run(&data, None, |_, _| Ok(())).unwrap();
            let c = t.counts;
            assert_eq!(c.audio + c.null, 24);
            if expect_null {
                assert_eq!(c.audio, 0);
            } else {
                assert_eq!(c.null, 0);
            }
        }
    }

    #[test]
    fn schedule_runs_to_completion() {
        let (mut t, data) = setup(small());
        assert_eq!(t.steps_per_epoch(12), 3);
        assert_eq!(t.total_steps(12), 12);
        let mut seen = Vec::new();
        t.run(&data, None, |_, l| {
            seen.push(l.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert!(t.train_step(&data).unwrap().is_none());
        assert!(t.train_step(&[]).is_err());
    }

    #[test]
    fn diffusion_loss_decreases() {
        let cfg = TrainConfig { epochs: 40, codec_epochs: 4, batch_size: 4, warmup_steps: 10, lr: 3e-3, seed: 1, ..Default::default() };
        let (mut t, data) = setup(cfg);
        let mut losses = Vec::new();
        t.run(&data, None, |_, l| {
            if l.stage == Stage::Diffusion {
                losses.push(l.parts.total);
            }
            Ok(())
        })
        .unwrap();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (head, tail) = (mean(&losses[..15]), mean(&losses[losses.len() - 15..]));
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn config_text_roundtrips() {
        let (t, _) = setup(small());
        let (m, c, v) = parse_config(&t.config_text()).unwrap();
        assert_eq!((m, c, v), (t.model.cfg.clone(), t.cfg.clone(), t.vocab.clone()));
        assert!(parse_config("width=16\n").is_err());
        assert!(parse_config("bogus=1\nvocab=a b\n").is_err());
    }
}
