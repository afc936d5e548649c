//! End-to-end use of the public library API on a tiny model.

use diffcap::audio::{MelConfig, MelExtractor, Waveform};
use diffcap::diffusion::{sample_batch, Guidance, Sample};
use diffcap::eval::{EvalCorpus, MetricReport};
use diffcap::synth::{build_dataset, read_manifest, write_dataset};
use diffcap::text::{detokenize, normalize, Vocab};
use diffcap::training::{Checkpoint, Example, TrainConfig, Trainer};
use diffcap::ModelConfig;

fn tiny_trainer(captions: &[&str]) -> Trainer {
    let mut train = TrainConfig::default();
    for (k, v) in [("epochs", "2"), ("codec_epochs", "1"), ("batch_size", "8"), ("warmup_steps", "2")] {
        assert!(train.set(k, v).unwrap());
    }
    Trainer::new(ModelConfig::tiny(), train, Vocab::build(captions).unwrap()).unwrap()
}

fn examples(t: &Trainer, items: &[(String, Waveform)]) -> Vec<Example> {
    let mel = MelExtractor::new(MelConfig::default());
    items.iter().map(|(c, w)| Example::new(c, w, &t.vocab, t.model.max_len(), &mel).unwrap()).collect()
}

fn captions(t: &Trainer, samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| detokenize(&s.tokens, &t.vocab).unwrap()).collect()
}

#[test]
fn written_corpus_trains_checkpoints_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_dataset(24, 2, 4, 3).unwrap();
    write_dataset(&ds, dir.path()).unwrap();

    let load = |split: &str| -> Vec<(String, Waveform)> {
        read_manifest(&dir.path().join(format!("{split}.tsv")))
            .unwrap()
            .into_iter()
            .map(|e| (e.caption, Waveform::read(&e.wav).unwrap()))
            .collect()
    };
    let train = load("train");
    let test = load("test");
    assert_eq!(train.len(), 24);
    // The manifest round trip reproduces the in-memory corpus.
    for ((c, w), item) in train.iter().zip(&ds.train) {
        assert_eq!(c, &item.caption);
        assert_eq!(w.to_wav_bytes(), item.waveform().unwrap().to_wav_bytes());
    }

    let texts: Vec<&str> = train.iter().map(|(c, _)| c.as_str()).collect();
    let mut t = tiny_trainer(&texts);
    let data = examples(&t, &train);
    let mut losses = Vec::new();
    t.run(&data, None, |_, log| {
        losses.push(log.parts.total);
        Ok(())
    })
    .unwrap();
    assert_eq!(t.step(), t.total_steps(data.len()));
    assert!(losses.iter().all(|l| l.is_finite()));

    let restored = Trainer::from_checkpoint(&Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap()).unwrap();
    let mel = MelExtractor::new(MelConfig::default());
    let specs: Vec<_> = test.iter().map(|(_, w)| mel.compute(w).unwrap()).collect();
    let spec_refs: Vec<_> = specs.iter().collect();
    let run = |tr: &Trainer| {
        let feats = tr.model.audio_features(&tr.store, &spec_refs).unwrap();
        sample_batch(&tr.model, &tr.store, &tr.sched, &feats.iter().collect::<Vec<_>>(), Guidance::Guided(2.0), 60, 9).unwrap()
    };
    let (a, b) = (run(&t), run(&restored));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tokens, y.tokens);
        assert_eq!(x.latent.data(), y.latent.data());
        assert_eq!(x.denoiser_calls, 2);
    }

    // Every generated word comes from the vocabulary, so scoring works.
    let hyps = captions(&t, &a);
    for h in &hyps {
        assert!(normalize(h).iter().all(|w| t.vocab.contains(w)), "{h}");
    }
    let lines: Vec<String> = hyps.iter().zip(&test).map(|(h, (r, _))| format!("{h}\t{r}")).collect();
    let report = MetricReport::compute(&EvalCorpus::from_tsv(&lines.join("\n")).unwrap()).unwrap();
    assert!(report.to_records().contains("bleu1="));
}

#[test]
fn batching_does_not_change_samples() {
    let ds = build_dataset(16, 1, 3, 11).unwrap();
    let texts: Vec<&str> = ds.train.iter().map(|i| i.caption.as_str()).collect();
    let t = tiny_trainer(&texts);
    let mel = MelExtractor::new(MelConfig::default());
    let specs: Vec<_> = ds.test.iter().map(|i| mel.compute(&i.waveform().unwrap()).unwrap()).collect();
    let feats = t.model.audio_features(&t.store, &specs.iter().collect::<Vec<_>>()).unwrap();
    let all = sample_batch(&t.model, &t.store, &t.sched, &feats.iter().collect::<Vec<_>>(), Guidance::Guided(2.5), 60, 100).unwrap();
    for (i, f) in feats.iter().enumerate() {
        let one = sample_batch(&t.model, &t.store, &t.sched, &[f], Guidance::Guided(2.5), 60, 100 + i as u64).unwrap().remove(0);
        assert_eq!(one.tokens, all[i].tokens);
        assert_eq!(one.latent.data(), all[i].latent.data());
    }
}
