use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_diffcap");

const TINY: [&str; 18] = [
    "--set", "width=16", "--set", "heads=2", "--set", "blocks=2", "--set", "time_embed_dim=8", "--set", "audio_hidden=16", "--set",
    "audio_layers=1", "--set", "transition_layers=1", "--set", "steps=100", "--set", "batch_size=16",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn diffcap")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "diffcap {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&["gen", "--out", s(dir), "--set", "n_train=100", "--set", "n_val=5", "--set", "n_test=12"]);
}

fn train_tiny(data: &Path, out: &Path, variant: &str) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--variant", variant, "--set", "epochs=2", "--set", "codec_epochs=1", "--set", "log_every=1"];
    args.extend(TINY);
    ok(&args)
}

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        gen(&data);
        let ck = dir.path().join("ck");
        train_tiny(&data, &ck, "dit");
        Fixture { checkpoint: ck.join("final.dacc"), data, _dir: dir }
    })
}

fn test_wavs(data: &Path) -> Vec<String> {
    fs::read_to_string(data.join("test.tsv"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split('\t').next())
        .map(|w| {
            let p = Path::new(w);
            if p.is_absolute() { w.to_string() } else { data.join(p).display().to_string() }
        })
        .collect()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["train"]).status.code(), Some(2), "missing --data");
    assert_eq!(run(&["gen", "--set", "no_such_key=1"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    fs::write(&hyp, "a dog barks\n").unwrap();
    let out = run(&["eval", "--hyp", s(&hyp), "--refs", s(&dir.path().join("missing.tsv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.tsv"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_is_deterministic_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a);
    gen(&b);
    for f in ["train.tsv", "val.tsv", "test.tsv", "test_refs.tsv"] {
        let (x, y) = (fs::read_to_string(a.join(f)).unwrap(), fs::read_to_string(b.join(f)).unwrap());
        assert_eq!(x.replace(s(&a), ""), y.replace(s(&b), ""), "{f}");
    }
    let wa = test_wavs(&a);
    let wb = test_wavs(&b);
    assert_eq!(wa.len(), 12);
    assert_eq!(fs::read(&wa[3]).unwrap(), fs::read(&wb[3]).unwrap());
    assert_eq!(run(&["gen", "--out", s(&a), "--set", "n_train=10"]).status.code(), Some(1));
    ok(&["gen", "--out", s(&a), "--force", "--set", "n_train=10", "--set", "n_val=1", "--set", "n_test=1"]);
    assert_eq!(fs::read_to_string(a.join("train.tsv")).unwrap().lines().count(), 10);
}

#[test]
fn uvit_trains_and_logs_each_step() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let stdout = train_tiny(&f.data, dir.path(), "uvit");
    let log = fs::read_to_string(dir.path().join("train.log")).unwrap();
    // 100 items at batch 16 is 7 steps per epoch, over 1 codec + 2 diffusion epochs.
    assert_eq!(log.lines().count(), 21);
    assert_eq!(stdout.lines().count(), 21);
    assert!(log.lines().last().unwrap().contains("stage=diffusion"));
    assert!(dir.path().join("final.dacc").exists());
}

#[test]
fn sampling_is_reproducible_and_counts_samples() {
    let f = fixture();
    let wavs = test_wavs(&f.data);
    let mut args = vec!["sample", "--checkpoint", s(&f.checkpoint), "--num-samples", "3", "--seed", "5"];
    args.extend(wavs[..4].iter().map(String::as_str));
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split('\t').count() == 3));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hyp.txt");
    ok(&["sample", "--checkpoint", s(&f.checkpoint), "--manifest", s(&f.data.join("test.tsv")), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), wavs.len());
    ok(&["eval", "--hyp", s(&out), "--refs", s(&f.data.join("test_refs.tsv"))]);
}

#[test]
fn malformed_wav_fails_run_but_keeps_others() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.wav");
    fs::write(&bad, b"RIFF not really a wave file").unwrap();
    let wavs = test_wavs(&f.data);
    let out = run(&["sample", "--checkpoint", s(&f.checkpoint), &wavs[0], s(&bad), &wavs[1]]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].is_empty());
    assert!(!lines[0].is_empty() && !lines[2].is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.wav"));
}

#[test]
fn eval_of_references_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.tsv");
    let hyp = dir.path().join("hyp.txt");
    fs::write(&refs, "a dog barks then a bell rings\nwater runs\n").unwrap();
    fs::write(&hyp, "a dog barks then a bell rings\nwater runs\n").unwrap();
    let out = ok(&["eval", "--hyp", s(&hyp), "--refs", s(&refs)]);
    assert!(out.lines().any(|l| l == "bleu1=1.000000"), "{out}");
    assert!(out.lines().any(|l| l == "rouge_l=1.000000"), "{out}");

    fs::write(&hyp, "only one line\n").unwrap();
    assert_eq!(run(&["eval", "--hyp", s(&hyp), "--refs", s(&refs)]).status.code(), Some(1));
}

#[test]
fn bench_reports_throughput_records() {
    let f = fixture();
    let out = ok(&["bench", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--batch", "4", "--repeats", "2", "--set", "bench_items=10"]);
    for key in ["tps", "aps", "tps_spread", "aps_spread", "batch", "stride", "denoiser_calls", "repeats", "audios"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{key}="))), "missing {key} in {out}");
    }
    // Tiny model: 100 steps at stride 60 visits 100, 40, 0.
    assert!(out.lines().any(|l| l == "denoiser_calls=2"), "{out}");
}
