use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{invalid, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Word-level vocabulary with four reserved ids (`PAD`, `BOS`, `EOS`, `UNK`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Ids follow descending frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in normalize(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(invalid("corpus contains no words"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(ranked.into_iter().map(|(w, _)| w).collect())
    }

    /// Non-reserved words in id order (`words[i]` has id `i + 4`).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(invalid(format!("invalid vocabulary entry {w:?}")));
            }
            if ids.insert(w.clone(), i + RESERVED).is_some() {
                return Err(invalid(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        if words.is_empty() {
            return Err(invalid("vocabulary needs at least one word"));
        }
        Ok(Self { words, ids })
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.words.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            UNK => Some("<unk>"),
            _ => self.words.get(id - RESERVED).map(String::as_str),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line; line `n` holds id `n + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            let _ = writeln!(s, "{w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_reserved_plus_words() {
        let v = Vocab::build(&["a dog barks"]).unwrap();
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn deterministic_and_case_folded() {
        let corpus = ["Dog runs, dog barks!", "a dog"];
        assert_eq!(Vocab::build(&corpus).unwrap(), Vocab::build(&corpus).unwrap());
        let v = Vocab::build(&corpus).unwrap();
        assert_eq!(v.id("dog"), RESERVED);
        assert!(!v.contains("Dog"));
        // ties: a, barks, runs all once -> lexicographic
        assert_eq!(v.words(), &["dog", "a", "barks", "runs"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocab::build::<&str>(&[]).is_err());
        assert!(Vocab::build(&["", "  ..."]).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let v = Vocab::build(&["the cat sat on the mat"]).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }
}
