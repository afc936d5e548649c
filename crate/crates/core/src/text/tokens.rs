use super::vocab::{normalize, Vocab, BOS, EOS, PAD, UNK};
use crate::error::{invalid, Result};

/// Default caption capacity in tokens, including `BOS` and `EOS`.
pub const MAX_LEN: usize = 40;

/// Fixed-length token ids with a validity mask covering `BOS..=EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Builds a sequence from raw predicted ids: the first `EOS` ends it and
    /// everything after is forced to `PAD`.
    pub fn from_predicted(mut ids: Vec<usize>) -> Self {
        let end = ids.iter().position(|&i| i == EOS);
        let valid = match end {
            Some(e) => {
                ids[e + 1..].iter_mut().for_each(|i| *i = PAD);
                (0..ids.len()).map(|p| p <= e).collect()
            }
            None => vec![true; ids.len()],
        };
        Self { ids, valid }
    }

    /// Number of caption words (between `BOS` and `EOS`, excluding both).
    pub fn word_count(&self) -> usize {
        self.ids
            .iter()
            .zip(&self.valid)
            .take_while(|(&i, _)| i != EOS)
            .filter(|(&i, &v)| v && i != PAD && i != BOS)
            .count()
    }

    /// Checks the `EOS`/`PAD` discipline.
    pub fn is_well_formed(&self) -> bool {
        if self.ids.len() != self.valid.len() {
            return false;
        }
        match self.ids.iter().position(|&i| i == EOS) {
            Some(e) => {
                self.valid[..=e].iter().all(|&v| v)
                    && self.valid[e + 1..].iter().all(|&v| !v)
                    && self.ids[e + 1..].iter().all(|&i| i == PAD)
            }
            None => self.valid.iter().all(|&v| v),
        }
    }
}

/// `BOS`, word ids, `EOS`, then `PAD` up to `max_len`; long inputs are truncated
/// to `max_len - 2` words.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
    let words = normalize(text);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(words.iter().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(EOS);
    let used = ids.len();
    ids.resize(max_len, PAD);
    let valid = (0..max_len).map(|p| p < used).collect();
    TokenSeq { ids, valid }
}

/// Joins the words before the first `EOS`, skipping `BOS`/`PAD`; `UNK` renders as `<unk>`.
pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> Result<String> {
    let mut out: Vec<&str> = Vec::new();
    for &id in &seq.ids {
        if id >= vocab.len() {
            return Err(invalid(format!("token id {id} out of range for vocabulary of {}", vocab.len())));
        }
        match id {
            EOS => break,
            PAD | BOS => {}
            UNK => out.push("<unk>"),
            _ => out.push(vocab.word(id).expect("id checked against vocabulary size")),
        }
    }
    Ok(out.join(" "))
}
