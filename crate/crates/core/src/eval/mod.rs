//! Caption metrics and the throughput harness.

mod metrics;
mod report;
mod speed;

pub use metrics::{
    bleu_n, cider, cider_items, distinct_n, mtld, rouge_l, rouge_l_items, rouge_l_pair, EvalCorpus, Tokens, CIDER_SIGMA,
    MTLD_THRESHOLD, ROUGE_BETA,
};
pub use report::{MetricReport, NOT_COMPUTED};
pub use speed::{benchmark_speed, SpeedReport, SpeedRun, DEFAULT_REPEATS, WARMUP_BATCHES};
