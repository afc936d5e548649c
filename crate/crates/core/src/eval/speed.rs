use std::time::{Duration, Instant};

use crate::error::{invalid, Error, Result};

pub const WARMUP_BATCHES: usize = 2;
pub const DEFAULT_REPEATS: usize = 10;

/// Throughput of one timed pass over all audios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedRun {
    pub seconds: f64,
    pub tokens: usize,
    pub audios: usize,
}

impl SpeedRun {
    pub fn tps(&self) -> f64 {
        self.tokens as f64 / self.seconds
    }

    pub fn aps(&self) -> f64 {
        self.audios as f64 / self.seconds
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedReport {
    pub runs: Vec<SpeedRun>,
    pub batch_size: usize,
}

impl SpeedReport {
    pub fn mean_tps(&self) -> f64 {
        self.runs.iter().map(SpeedRun::tps).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_aps(&self) -> f64 {
        self.runs.iter().map(SpeedRun::aps).sum::<f64>() / self.runs.len() as f64
    }

    /// Largest relative deviation of any run's TPS from the mean.
    pub fn tps_spread(&self) -> f64 {
        let m = self.mean_tps();
        self.runs.iter().map(|r| (r.tps() / m - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn aps_spread(&self) -> f64 {
        let m = self.mean_aps();
        self.runs.iter().map(|r| (r.aps() / m - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Times `captioner` over `audios` in batches. The captioner returns the
/// generated token count (before padding) of each audio in the batch. The
/// first two batches run once untimed; then `repeats` timed passes are made.
pub fn benchmark_speed<A>(
    audios: &[A],
    batch_size: usize,
    repeats: usize,
    mut captioner: impl FnMut(&[A]) -> Result<Vec<usize>>,
) -> Result<SpeedReport> {
    if audios.len() < 10 {
        return Err(invalid(format!("speed benchmark needs at least 10 audios, got {}", audios.len())));
    }
    if batch_size == 0 || repeats == 0 {
        return Err(invalid("batch size and repeats must be positive"));
    }
    let mut call = |i: usize, batch: &[A]| -> Result<usize> {
        let counts = captioner(batch).map_err(|e| Error::Batch { index: i, source: Box::new(e) })?;
        if counts.len() != batch.len() {
            return Err(Error::Batch { index: i, source: Box::new(invalid("captioner returned the wrong number of results")) });
        }
        Ok(counts.iter().sum())
    };
    for (i, batch) in audios.chunks(batch_size).take(WARMUP_BATCHES).enumerate() {
        call(i, batch)?;
    }
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let mut tokens = 0;
        for (i, batch) in audios.chunks(batch_size).enumerate() {
            tokens += call(i, batch)?;
        }
        let seconds = start.elapsed().max(Duration::from_nanos(1)).as_secs_f64();
        runs.push(SpeedRun { seconds, tokens, audios: audios.len() });
    }
    Ok(SpeedReport { runs, batch_size })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_arithmetic() {
        let r = SpeedRun { seconds: 2.0, tokens: 100, audios: 20 };
        assert_eq!(r.tps(), 50.0);
        let r = SpeedRun { seconds: 4.0, tokens: 0, audios: 20 };
        assert_eq!(r.aps(), 5.0);
    }

    #[test]
    fn warmup_and_repeats() {
        let audios: Vec<u32> = (0..12).collect();
        let mut calls = 0;
        let rep = benchmark_speed(&audios, 5, 3, |b| {
            calls += 1;
            Ok(vec![4; b.len()])
        })
        .unwrap();
        // 2 warmup batches, then 3 passes of 3 batches.
        assert_eq!(calls, 2 + 9);
        assert_eq!(rep.runs.len(), 3);
        assert!(rep.runs.iter().all(|r| r.tokens == 48 && r.audios == 12));
    }

    #[test]
    fn failures_name_the_batch() {
        let audios: Vec<u32> = (0..10).collect();
        let err = benchmark_speed(&audios, 4, 1, |b| if b[0] == 8 { Err(invalid("boom")) } else { Ok(vec![1; b.len()]) }).unwrap_err();
        assert!(matches!(err, Error::Batch { index: 2, .. }), "{err}");
        assert!(benchmark_speed(&audios[..9], 4, 1, |b| Ok(vec![1; b.len()])).is_err());
    }
}
