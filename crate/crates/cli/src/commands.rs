use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use diffcap::audio::{MelConfig, MelExtractor, Waveform};
use diffcap::diffusion::{step_sequence, Guidance};
use diffcap::eval::{benchmark_speed, EvalCorpus, MetricReport};
use diffcap::synth::{build_dataset, captions_for_kinds, read_manifest, write_dataset, Split};
use diffcap::text::Vocab;
use diffcap::training::{Checkpoint, Example, Trainer};

use crate::{Captioner, Command, ConfigArgs, RunConfig, UsageError};

/// Marker for errors whose message has already been printed.
#[derive(Debug)]
pub struct Handled;

impl fmt::Display for Handled {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("handled")
    }
}

impl std::error::Error for Handled {}

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.data_seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    Ok(write_stdout(text)?)
}

// A closed reader (`| head`) is not an error.
fn write_stdout(text: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e),
        _ => Ok(()),
    }
}

fn echo(cfg: &RunConfig) {
    eprint!("# effective config\n{}", cfg.echo());
}

fn required(p: Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    p.ok_or_else(|| usage(format!("missing {what}")))
}

fn existing(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", p.display())))
    }
}

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Gen { cfg, out, force } => {
            let mut cfg = resolve(&cfg)?;
            if out.is_some() {
                cfg.data_dir = out;
            }
            cfg.validate()?;
            let dir = required(cfg.data_dir.clone(), "output directory (--out or data_dir)")?;
            echo(&cfg);
            gen(&cfg, &dir, force)
        }
        Command::Train { cfg, data, out, variant, resume, max_steps } => {
            let mut cfg = resolve(&cfg)?;
            if let Some(v) = variant {
                cfg.set("variant", &v)?;
            }
            cfg.data_dir = data.or(cfg.data_dir);
            cfg.out_dir = out.or(cfg.out_dir);
            cfg.validate()?;
            let data = required(cfg.data_dir.clone(), "dataset directory (--data or data_dir)")?;
            let out = required(cfg.out_dir.clone(), "checkpoint directory (--out or out_dir)")?;
            existing(&data.join("train.tsv"), "training manifest")?;
            if let Some(r) = &resume {
                existing(r, "checkpoint")?;
            }
            echo(&cfg);
            train(&cfg, &data, &out, resume.as_deref(), max_steps)
        }
        Command::Sample { cfg, checkpoint, manifest, out, num_samples, guidance, stride, wavs } => {
            let mut cfg = resolve(&cfg)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.num_samples = num_samples.unwrap_or(cfg.num_samples);
            cfg.guidance = guidance.unwrap_or(cfg.guidance);
            cfg.stride = stride.unwrap_or(cfg.stride);
            cfg.validate()?;
            let ck = required(cfg.checkpoint.clone(), "checkpoint (--checkpoint or checkpoint)")?;
            existing(&ck, "checkpoint")?;
            let mut inputs = wavs;
            if let Some(m) = manifest {
                existing(&m, "manifest")?;
                inputs.extend(read_manifest(&m)?.into_iter().map(|e| e.wav));
            }
            if inputs.is_empty() {
                return Err(usage("no input wav files"));
            }
            echo(&cfg);
            sample(&cfg, &ck, &inputs, out.as_deref())
        }
        Command::Eval { hyp, refs, corpus } => {
            let corpus = match (hyp, refs, corpus) {
                (Some(h), Some(r), None) => {
                    existing(&h, "hypothesis file")?;
                    existing(&r, "reference file")?;
                    load_pair(&h, &r)?
                }
                (None, None, Some(c)) => {
                    existing(&c, "corpus file")?;
                    EvalCorpus::from_tsv(&fs::read_to_string(&c)?)?
                }
                _ => return Err(usage("pass either --hyp and --refs, or --corpus")),
            };
            let report = MetricReport::compute(&corpus)?;
            emit(&format!("{}\n{}", report.to_records(), report.to_table()))
        }
        Command::Bench { cfg, checkpoint, data, batch, stride, repeats } => {
            let mut cfg = resolve(&cfg)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.data_dir = data.or(cfg.data_dir);
            cfg.bench_batch = batch.unwrap_or(cfg.bench_batch);
            cfg.stride = stride.unwrap_or(cfg.stride);
            cfg.repeats = repeats.unwrap_or(cfg.repeats);
            cfg.validate()?;
            let ck = required(cfg.checkpoint.clone(), "checkpoint (--checkpoint or checkpoint)")?;
            let data = required(cfg.data_dir.clone(), "dataset directory (--data or data_dir)")?;
            existing(&ck, "checkpoint")?;
            existing(&data.join("test.tsv"), "test manifest")?;
            echo(&cfg);
            bench(&cfg, &ck, &data)
        }
    }
}

/// Reference file name written next to each split manifest.
pub fn refs_file(split: Split) -> String {
    format!("{}_refs.tsv", split.name())
}

fn gen(cfg: &RunConfig, dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            bail!("output directory {} is not empty (use --force to replace it)", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let ds = build_dataset(cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed)?;
    write_dataset(&ds, dir)?;
    for split in Split::ALL {
        let mut text = String::new();
        for item in ds.split(split) {
            text.push_str(&captions_for_kinds(&item.scene.kinds()).join("\t"));
            text.push('\n');
        }
        fs::write(dir.join(refs_file(split)), text)?;
        emit(&format!("{}={}\n", split.name(), ds.split(split).len()))?;
    }
    Ok(())
}

/// Loads the training split of `data` as examples with precomputed features.
pub fn load_examples(data: &Path, vocab: &Vocab, max_len: usize) -> anyhow::Result<Vec<Example>> {
    let mel = MelExtractor::new(MelConfig::default());
    read_manifest(&data.join("train.tsv"))?
        .iter()
        .map(|e| {
            let wav = Waveform::read(&e.wav).with_context(|| format!("reading {}", e.wav.display()))?;
            Ok(Example::new(&e.caption, &wav, vocab, max_len, &mel)?)
        })
        .collect()
}

pub fn train_vocab(data: &Path) -> anyhow::Result<Vocab> {
    let captions: Vec<String> = read_manifest(&data.join("train.tsv"))?.into_iter().map(|e| e.caption).collect();
    Ok(Vocab::build(&captions)?)
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt-{step:07}.dacc"))
}

/// Path of the checkpoint written when training completes.
pub fn final_checkpoint(out: &Path) -> PathBuf {
    out.join("final.dacc")
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>, max_steps: Option<u64>) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            eprintln!("# resumed at step {} from {}", t.step(), p.display());
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), train_vocab(data)?)?,
    };
    let started = Instant::now();
    let examples = load_examples(data, &trainer.vocab, trainer.model.max_len())?;
    let total = trainer.total_steps(examples.len());
    eprintln!("# {} examples, {} params, {total} steps, features in {:.1}s", examples.len(), trainer.store.numel(), started.elapsed().as_secs_f64());
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join("train.log"))?;
    let (every, log_every) = (cfg.checkpoint_every, cfg.log_every);
    let result = trainer.run(&examples, max_steps, |t, l| {
        writeln!(log, "{l}")?;
        if t.step() % log_every == 0 || t.step() == total {
            write_stdout(&format!("{l} elapsed={:.0}s\n", started.elapsed().as_secs_f64()))?;
        }
        if t.step() % every == 0 && t.step() < total {
            t.checkpoint().save(checkpoint_path(out, t.step()))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        // Keep the last good state for inspection before failing.
        trainer.checkpoint().save(checkpoint_path(out, trainer.step()))?;
        return Err(anyhow::Error::new(e).context(format!("training failed at step {}", trainer.step())));
    }
    let path = if trainer.step() >= total { final_checkpoint(out) } else { checkpoint_path(out, trainer.step()) };
    trainer.checkpoint().save(&path)?;
    eprintln!("# wrote {} after {:.0}s", path.display(), started.elapsed().as_secs_f64());
    Ok(())
}

fn sample(cfg: &RunConfig, ck: &Path, inputs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let cap = Captioner::load(ck)?;
    let guidance = Guidance::Guided(cfg.guidance);
    let k = cfg.num_samples as u64;
    let mut lines = vec![String::new(); inputs.len()];
    let mut failures = 0;
    let mut loaded = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        match Waveform::read(p) {
            Ok(w) => loaded.push((i, w)),
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                failures += 1;
            }
        }
    }
    for chunk in loaded.chunks(cfg.sample_batch) {
        let wavs: Vec<&Waveform> = chunk.iter().map(|(_, w)| w).collect();
        let seeds: Vec<Vec<u64>> =
            chunk.iter().map(|(i, _)| (0..k).map(|j| cfg.seed.wrapping_add(*i as u64 * k + j)).collect()).collect();
        let samples = cap.sample(&wavs, guidance, cfg.stride, &seeds)?;
        for ((i, _), s) in chunk.iter().zip(samples) {
            lines[*i] = s.iter().map(|x| cap.text(x)).collect::<diffcap::Result<Vec<_>>>()?.join("\t");
        }
    }
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&text)?,
    }
    if failures > 0 {
        bail!("{failures} of {} input files could not be read", inputs.len());
    }
    Ok(())
}

fn load_pair(hyp: &Path, refs: &Path) -> anyhow::Result<EvalCorpus> {
    let h = fs::read_to_string(hyp)?;
    let r = fs::read_to_string(refs)?;
    let (h, r): (Vec<&str>, Vec<&str>) = (h.lines().collect(), r.lines().collect());
    if h.len() != r.len() {
        bail!("{} has {} lines but {} has {}", hyp.display(), h.len(), refs.display(), r.len());
    }
    let pairs: Vec<(&str, Vec<&str>)> =
        h.iter().zip(&r).map(|(h, r)| (h.split('\t').next().unwrap_or(""), r.split('\t').collect())).collect();
    Ok(EvalCorpus::from_text(&pairs)?)
}

fn bench(cfg: &RunConfig, ck: &Path, data: &Path) -> anyhow::Result<()> {
    let cap = Captioner::load(ck)?;
    let wavs = read_manifest(&data.join("test.tsv"))?
        .iter()
        .take(cfg.bench_items)
        .map(|e| Waveform::read(&e.wav).with_context(|| format!("reading {}", e.wav.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let guidance = Guidance::Guided(cfg.guidance);
    let report = benchmark_speed(&wavs, cfg.bench_batch, cfg.repeats, |batch| {
        let refs: Vec<&Waveform> = batch.iter().collect();
        let seeds: Vec<Vec<u64>> = (0..batch.len() as u64).map(|i| vec![cfg.seed.wrapping_add(i)]).collect();
        let out = cap.sample(&refs, guidance, cfg.stride, &seeds)?;
        Ok(out.iter().map(|s| s[0].tokens.word_count()).collect())
    })?;
    let calls = step_sequence(cap.sched.steps(), cfg.stride)?.len() - 1;
    let records = [
        format!("tps={:.3}", report.mean_tps()),
        format!("aps={:.3}", report.mean_aps()),
        format!("tps_spread={:.4}", report.tps_spread()),
        format!("aps_spread={:.4}", report.aps_spread()),
        format!("batch={}", cfg.bench_batch),
        format!("stride={}", cfg.stride),
        format!("denoiser_calls={calls}"),
        format!("repeats={}", report.runs.len()),
        format!("audios={}", wavs.len()),
    ];
    emit(&(records.join("\n") + "\n"))?;
    Ok(())
}
