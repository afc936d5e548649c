use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::render::render_waveform;
use super::scene::{scene_space_size, Scene};
use crate::audio::Waveform;
use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct SynthItem {
    pub scene: Scene,
    pub caption: String,
}

impl SynthItem {
    pub fn signature(&self) -> String {
        self.scene.signature()
    }

    pub fn waveform(&self) -> Result<Waveform> {
        render_waveform(&self.scene)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generated items; every signature appears once across all splits.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub seed: u64,
    pub train: Vec<SynthItem>,
    pub val: Vec<SynthItem>,
    pub test: Vec<SynthItem>,
}

impl SynthDataset {
    pub fn split(&self, s: Split) -> &[SynthItem] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Draws scenes with seeds `seed, seed + 1, ...`, skipping repeated signatures.
pub fn build_dataset(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<SynthDataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(invalid("every split needs at least one item"));
    }
    let wanted = n_train + n_val + n_test;
    let space = scene_space_size();
    if wanted as u128 > space {
        return Err(invalid(format!("requested {wanted} scenes but only {space} distinct scenes exist")));
    }
    let mut seen = HashSet::with_capacity(wanted);
    let mut items = Vec::with_capacity(wanted);
    let mut k = 0u64;
    while items.len() < wanted {
        let scene = Scene::random(seed.wrapping_add(k));
        k += 1;
        if seen.insert(scene.signature()) {
            let caption = scene.caption();
            items.push(SynthItem { scene, caption });
        }
    }
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    Ok(SynthDataset { seed, train: items, val, test })
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub caption: String,
    pub signature: String,
}

/// Writes `wav/<split>_NNNNN.wav` files and `<split>.tsv` manifests under `dir`.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("wav"))?;
    for split in Split::ALL {
        let mut manifest = String::new();
        for (i, item) in ds.split(split).iter().enumerate() {
            let rel = format!("wav/{}_{i:05}.wav", split.name());
            item.waveform()?.write(dir.join(&rel))?;
            manifest.push_str(&format!("{rel}\t{}\t{}\n", item.caption, item.signature()));
        }
        fs::File::create(dir.join(format!("{}.tsv", split.name())))?.write_all(manifest.as_bytes())?;
    }
    Ok(())
}

/// Reads a manifest; relative wav paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(w), Some(c), Some(s)) => Ok(ManifestEntry { wav: base.join(w), caption: c.to_string(), signature: s.to_string() }),
                _ => Err(invalid(format!("{}:{}: expected wav, caption and signature columns", path.display(), n + 1))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, Vocab, UNK};

    #[test]
    fn deterministic_and_disjoint() {
        let a = build_dataset(200, 20, 30, 7).unwrap();
        let b = build_dataset(200, 20, 30, 7).unwrap();
        let sigs = |d: &SynthDataset, s| d.split(s).iter().map(SynthItem::signature).collect::<Vec<_>>();
        for s in Split::ALL {
            assert_eq!(sigs(&a, s), sigs(&b, s));
        }
        let train: HashSet<_> = sigs(&a, Split::Train).into_iter().collect();
        let val: HashSet<_> = sigs(&a, Split::Val).into_iter().collect();
        let test: HashSet<_> = sigs(&a, Split::Test).into_iter().collect();
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (200, 20, 30));
    }

    #[test]
    fn captions_close_under_train_vocab() {
        let ds = build_dataset(500, 50, 100, 1).unwrap();
        let caps: Vec<&str> = ds.train.iter().map(|i| i.caption.as_str()).collect();
        let vocab = Vocab::build(&caps).unwrap();
        assert!(vocab.words().len() <= 60);
        for item in ds.val.iter().chain(&ds.test) {
            for c in item.scene.all_captions() {
                assert!(!tokenize(&c, &vocab, 40).ids.contains(&UNK), "{c}");
            }
        }
    }

    #[test]
    fn oversized_request_fails() {
        let space = scene_space_size() as usize;
        assert!(build_dataset(space, 1, 1, 0).is_err());
        assert!(build_dataset(0, 1, 1, 0).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(3, 1, 1, 2).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let rows = read_manifest(&dir.path().join("train.tsv")).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].caption, ds.train[0].caption);
        let w = Waveform::read(&rows[0].wav).unwrap();
        assert_eq!(w.len(), 32_000);
    }
}
