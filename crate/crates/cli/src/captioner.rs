use std::path::Path;

use anyhow::Context;
use diffcap::audio::{MelConfig, CLIP_SAMPLES, MelExtractor, MelSpec, Waveform};
use diffcap::diffusion::{sample_seeded, Guidance, NoiseSchedule, Sample};
use diffcap::text::{detokenize, Vocab};
use diffcap::training::{Checkpoint, Trainer};
use diffcap::{Model, ParamStore, Tensor};

/// A trained model ready for inference.
pub struct Captioner {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub sched: NoiseSchedule,
    pub vocab: Vocab,
    mel: MelExtractor,
}

impl Captioner {
    pub fn from_trainer(t: Trainer) -> Self {
        Self { model: t.model, store: t.store, sched: t.sched, vocab: t.vocab, mel: MelExtractor::new(MelConfig::default()) }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Ok(Self::from_trainer(Trainer::from_checkpoint(&ck)?))
    }

    pub fn mel(&self, wav: &Waveform) -> diffcap::Result<MelSpec> {
        if wav.len() == CLIP_SAMPLES {
            self.mel.compute(wav)
        } else {
            self.mel.compute(&wav.clone().fit(CLIP_SAMPLES))
        }
    }

    pub fn features(&self, wavs: &[&Waveform]) -> diffcap::Result<Vec<Tensor<f32>>> {
        let specs = wavs.iter().map(|w| self.mel(w)).collect::<diffcap::Result<Vec<_>>>()?;
        self.model.audio_features(&self.store, &specs.iter().collect::<Vec<_>>())
    }

    /// Samples `seeds.len()` captions per clip; returns them clip-major.
    pub fn sample(&self, wavs: &[&Waveform], guidance: Guidance, stride: usize, seeds: &[Vec<u64>]) -> diffcap::Result<Vec<Vec<Sample>>> {
        let feats = self.features(wavs)?;
        let mut refs = Vec::new();
        let mut flat = Vec::new();
        for (f, s) in feats.iter().zip(seeds) {
            for &seed in s {
                refs.push(f);
                flat.push(seed);
            }
        }
        let mut out = sample_seeded(&self.model, &self.store, &self.sched, &refs, guidance, stride, &flat)?.into_iter();
        Ok(seeds.iter().map(|s| out.by_ref().take(s.len()).collect()).collect())
    }

    pub fn text(&self, sample: &Sample) -> diffcap::Result<String> {
        detokenize(&sample.tokens, &self.vocab)
    }
}
