//! Shared fixtures for the benchmarks.

use diffcap::audio::{MelConfig, MelExtractor, MelSpec, Waveform};
use diffcap::synth::build_dataset;
use diffcap::text::Vocab;
use diffcap::training::{Example, TrainConfig, Trainer};
use diffcap::ModelConfig;

/// A freshly initialised trainer plus a few clips from the synthetic corpus.
pub struct Fixture {
    pub trainer: Trainer,
    pub waves: Vec<Waveform>,
    pub specs: Vec<MelSpec>,
    pub examples: Vec<Example>,
    pub captions: Vec<String>,
}

/// Builds a fixture with `n` clips; `full` selects the default model size
/// instead of the tiny test configuration.
pub fn fixture(n: usize, full: bool) -> Fixture {
    let ds = build_dataset(n, 1, 1, 0).expect("dataset");
    let captions: Vec<String> = ds.train.iter().map(|i| i.caption.clone()).collect();
    let vocab = Vocab::build(&captions).expect("vocab");
    let model = if full { ModelConfig::default() } else { ModelConfig::tiny() };
    // One full-batch codec step, then effectively unbounded diffusion steps.
    let cfg = TrainConfig { batch_size: n, codec_epochs: 1, epochs: 1_000_000, ..TrainConfig::default() };
    let trainer = Trainer::new(model, cfg, vocab).expect("trainer");
    let mel = MelExtractor::new(MelConfig::default());
    let waves: Vec<Waveform> = ds.train.iter().map(|i| i.waveform().expect("render")).collect();
    let specs = waves.iter().map(|w| mel.compute(w).expect("mel")).collect();
    let examples = captions
        .iter()
        .zip(&waves)
        .map(|(c, w)| Example::new(c, w, &trainer.vocab, trainer.model.max_len(), &mel).expect("example"))
        .collect();
    Fixture { trainer, waves, specs, examples, captions }
}
