//! Summary statistics over latency samples.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

impl Summary {
    /// Mean and nearest-rank percentiles. An empty slice gives all zeros.
    pub fn from_samples(samples: &[u64]) -> Summary {
        if samples.is_empty() {
            return Summary {
                mean: 0.0,
                p50: 0.0,
                p99: 0.0,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let sum: u128 = sorted.iter().map(|&s| u128::from(s)).sum();
        Summary {
            mean: sum as f64 / sorted.len() as f64,
            p50: nearest_rank(&sorted, 50) as f64,
            p99: nearest_rank(&sorted, 99) as f64,
        }
    }
}

/// The smallest sample with at least `pct` percent of samples at or below it.
pub fn nearest_rank(sorted: &[u64], pct: u32) -> u64 {
    let n = sorted.len();
    let rank = (n * pct as usize).div_ceil(100).max(1);
    sorted[rank - 1]
}
