//! Workload generation, cached and uncached replay, latency sweeps and the
//! self-checking scenarios behind the acceptance suite.

pub mod run;
pub mod scenarios;
pub mod sweep;
pub mod workload;

pub use run::{compare, run, BenchError, BenchReport, BenchRun, Comparison, RunOptions};
pub use sweep::{latency_sweep, SweepCell, SweepConfig};
pub use workload::{generate, CostMix, LenRange, Workload, WorkloadSpec};

/// Nearest-rank percentile; `p` in [0, 1]. Zero for an empty sample.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let xs = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(percentile(&xs, 0.5), 3.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 1.0), 5.0);
        assert_eq!(percentile(&xs, 0.95), 5.0);
        assert_eq!(percentile(&[1.0, 2.0], 0.5), 1.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
        assert_eq!(mean(&xs), 3.0);
    }
}
