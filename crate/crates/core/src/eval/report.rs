use std::fmt::Write;

use super::metrics::{bleu_n, cider, distinct_n, mtld, rouge_l, rouge_l_items, EvalCorpus, MTLD_THRESHOLD};
use super::speed::SpeedReport;
use crate::error::Result;

/// Metrics that need external models or data and are reported as absent.
pub const NOT_COMPUTED: [&str; 6] = ["meteor", "spice", "spider", "clap", "bert_sim", "gpt4_eval"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    /// `None` for single-item corpora.
    pub cider: Option<f64>,
    pub distinct1: Option<f64>,
    pub mtld: Option<f64>,
    pub per_item_rouge: Vec<f64>,
    pub speed: Option<SpeedReport>,
}

impl MetricReport {
    pub fn compute(corpus: &EvalCorpus) -> Result<Self> {
        let mut bleu = [0.0; 4];
        for (n, b) in bleu.iter_mut().enumerate() {
            *b = bleu_n(corpus, n + 1)?;
        }
        let hyps = corpus.hypotheses();
        let pooled: Vec<&str> = hyps.iter().flat_map(|h| h.iter().map(String::as_str)).collect();
        Ok(Self {
            bleu,
            rouge_l: rouge_l(corpus),
            cider: if corpus.len() >= 2 { Some(cider(corpus)?) } else { None },
            distinct1: distinct_n(&hyps.iter().map(|h| h.to_vec()).collect::<Vec<_>>(), 1).ok(),
            mtld: mtld(&pooled, MTLD_THRESHOLD).ok(),
            per_item_rouge: rouge_l_items(corpus),
            speed: None,
        })
    }

    /// `key=value` records, one per line.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("not computed".to_string(), |x| format!("{x:.6}"));
        for (n, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(out, "bleu{}={b:.6}", n + 1);
        }
        let _ = writeln!(out, "rouge_l={:.6}", self.rouge_l);
        let _ = writeln!(out, "cider={}", opt(self.cider));
        let _ = writeln!(out, "distinct1={}", opt(self.distinct1));
        let _ = writeln!(out, "mtld={}", opt(self.mtld));
        for name in NOT_COMPUTED {
            let _ = writeln!(out, "{name}=not computed");
        }
        if let Some(s) = &self.speed {
            let _ = writeln!(out, "tps={:.3}", s.mean_tps());
            let _ = writeln!(out, "aps={:.3}", s.mean_aps());
            let _ = writeln!(out, "speed_runs={}", s.runs.len());
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        let opt = |v: Option<f64>| v.map_or("not computed".to_string(), |x| format!("{x:.4}"));
        for (n, b) in self.bleu.iter().enumerate() {
            rows.push((format!("BLEU-{}", n + 1), format!("{b:.4}")));
        }
        rows.push(("ROUGE-L".into(), format!("{:.4}", self.rouge_l)));
        rows.push(("CIDEr".into(), opt(self.cider)));
        rows.push(("Distinct-1".into(), opt(self.distinct1)));
        rows.push(("MTLD".into(), opt(self.mtld)));
        for name in ["METEOR", "SPICE", "SPIDEr", "CLAP", "BERT-sim", "GPT4-eval"] {
            rows.push((name.into(), "not computed".into()));
        }
        if let Some(s) = &self.speed {
            rows.push(("TPS".into(), format!("{:.2}", s.mean_tps())));
            rows.push(("APS".into(), format!("{:.2}", s.mean_aps())));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_report() {
        let c = EvalCorpus::from_text(&[("a high pitched tone", vec!["a high pitched tone"]), ("a burst of static", vec!["a burst of static"])]).unwrap();
        let r = MetricReport::compute(&c).unwrap();
        assert_eq!(r.bleu[0], 1.0);
        let rec = r.to_records();
        assert!(rec.contains("bleu1=1.000000"));
        assert!(rec.contains("spice=not computed"));
        assert!(r.to_table().contains("METEOR"));
    }

    #[test]
    fn single_item_has_no_cider() {
        let c = EvalCorpus::from_text(&[("a b", vec!["a b"])]).unwrap();
        let r = MetricReport::compute(&c).unwrap();
        assert!(r.cider.is_none());
        assert!(r.to_records().contains("cider=not computed"));
    }
}
