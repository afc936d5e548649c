use std::collections::{HashMap, HashSet};

use crate::error::{invalid, Error, Result};
use crate::text::normalize;

pub type Tokens = Vec<String>;

/// Hypotheses paired with one or more references, already normalized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    pub items: Vec<(Tokens, Vec<Tokens>)>,
}

impl EvalCorpus {
    pub fn new(items: Vec<(Tokens, Vec<Tokens>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("evaluation corpus is empty"));
        }
        if items.iter().any(|(_, refs)| refs.is_empty()) {
            return Err(invalid("every hypothesis needs at least one reference"));
        }
        Ok(Self { items })
    }

    /// Normalizes raw strings with the tokenizer rules.
    pub fn from_text<S: AsRef<str>>(pairs: &[(S, Vec<S>)]) -> Result<Self> {
        Self::new(pairs.iter().map(|(h, refs)| (normalize(h.as_ref()), refs.iter().map(|r| normalize(r.as_ref())).collect())).collect())
    }

    /// Parses `hypothesis<TAB>reference[<TAB>reference...]` lines.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let pairs: Vec<(&str, Vec<&str>)> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut cols = l.split('\t');
                let hyp = cols.next().unwrap_or_default();
                (hyp, cols.collect())
            })
            .collect();
        Self::from_text(&pairs)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn hypotheses(&self) -> Vec<&Tokens> {
        self.items.iter().map(|(h, _)| h).collect()
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with clipped n-gram precision, uniform weights over `1..=n`
/// and the brevity penalty against the closest reference length.
pub fn bleu_n(corpus: &EvalCorpus, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(invalid(format!("BLEU order must be 1..=4, got {n}")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in &corpus.items {
        hyp_len += hyp.len();
        ref_len += refs.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(hyp.len()), r)).unwrap_or(0);
        for k in 1..=n {
            let h = ngrams(hyp, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            matched[k - 1] += h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[k - 1] += hyp.len().saturating_sub(k - 1);
        }
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure of one hypothesis against one reference.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Per-item ROUGE-L (best reference), averaged over items.
pub fn rouge_l(corpus: &EvalCorpus) -> f64 {
    rouge_l_items(corpus).iter().sum::<f64>() / corpus.len().max(1) as f64
}

pub fn rouge_l_items(corpus: &EvalCorpus) -> Vec<f64> {
    corpus.items.iter().map(|(h, refs)| refs.iter().map(|r| rouge_l_pair(h, r)).fold(0.0, f64::max)).collect()
}

pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_N: usize = 4;

struct TfIdf<'a> {
    vecs: Vec<HashMap<&'a [String], f64>>,
    len: usize,
}

fn tf_idf<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_n: f64) -> TfIdf<'a> {
    let vecs = (1..=CIDER_N)
        .map(|k| {
            ngrams(tokens, k)
                .into_iter()
                .map(|(g, c)| {
                    let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                    (g, c as f64 * (log_n - d.ln()))
                })
                .collect()
        })
        .collect();
    TfIdf { vecs, len: tokens.len() }
}

/// `sum min(h, r) * r / (|h| |r|)`; zero when either vector is empty.
fn clipped_cosine(h: &HashMap<&[String], f64>, r: &HashMap<&[String], f64>) -> f64 {
    let norm = |m: &HashMap<&[String], f64>| m.values().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm(h) * norm(r);
    if denom == 0.0 {
        return 0.0;
    }
    let dot: f64 = h
        .iter()
        .map(|(g, &hv)| {
            let rv = r.get(g).copied().unwrap_or(0.0);
            hv.min(rv) * rv
        })
        .sum();
    dot / denom
}

/// CIDEr-D: tf-idf n-gram vectors (`n = 1..=4`, idf over items' reference
/// sets), clipped cosine per order, Gaussian length penalty, scaled by 10.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    let items = cider_items(corpus)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

pub fn cider_items(corpus: &EvalCorpus) -> Result<Vec<f64>> {
    let n_items = corpus.len();
    if n_items < 2 {
        return Err(Error::IdfUndefined(n_items));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for (_, refs) in &corpus.items {
        let mut seen = HashSet::new();
        for r in refs {
            for k in 1..=CIDER_N {
                seen.extend(ngrams(r, k).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (n_items as f64).ln();
    let vectorize = |tokens| tf_idf(tokens, &df, log_n);
    Ok(corpus
        .items
        .iter()
        .map(|(hyp, refs)| {
            let h = vectorize(hyp);
            let total: f64 = refs
                .iter()
                .map(|r| {
                    let r = vectorize(r);
                    let delta = h.len as f64 - r.len as f64;
                    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                    (0..CIDER_N).map(|k| clipped_cosine(&h.vecs[k], &r.vecs[k]) * penalty).sum::<f64>() / CIDER_N as f64
                })
                .sum();
            total / refs.len() as f64 * 10.0
        })
        .collect())
}

/// Unique n-grams over total n-grams, pooled across all captions.
pub fn distinct_n<S: AsRef<str>>(captions: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("distinct-n needs n >= 1"));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for c in captions {
        let toks: Vec<&str> = c.iter().map(AsRef::as_ref).collect();
        if toks.len() >= n {
            for w in toks.windows(n) {
                unique.insert(w.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(invalid(format!("no caption has {n} or more tokens")));
    }
    Ok(unique.len() as f64 / total as f64)
}

pub const MTLD_THRESHOLD: f64 = 0.72;

fn mtld_pass<S: AsRef<str>>(tokens: impl Iterator<Item = S>, threshold: f64) -> f64 {
    let mut factors = 0.0;
    let mut types: HashSet<String> = HashSet::new();
    let (mut count, mut total) = (0usize, 0usize);
    for t in tokens {
        total += 1;
        count += 1;
        types.insert(t.as_ref().to_string());
        if (types.len() as f64 / count as f64) < threshold {
            factors += 1.0;
            types.clear();
            count = 0;
        }
    }
    if count > 0 {
        let ttr = types.len() as f64 / count as f64;
        factors += (1.0 - ttr) / (1.0 - threshold);
    }
    if factors == 0.0 {
        total as f64
    } else {
        total as f64 / factors
    }
}

/// Mean of forward and backward MTLD passes.
pub fn mtld<S: AsRef<str>>(tokens: &[S], threshold: f64) -> Result<f64> {
    if tokens.is_empty() {
        return Err(invalid("MTLD needs at least one token"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("MTLD threshold must be in (0, 1), got {threshold}")));
    }
    let fwd = mtld_pass(tokens.iter().map(AsRef::as_ref), threshold);
    let bwd = mtld_pass(tokens.iter().rev().map(AsRef::as_ref), threshold);
    Ok((fwd + bwd) / 2.0)
}
