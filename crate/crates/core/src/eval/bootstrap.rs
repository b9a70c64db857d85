//! Percentile bootstrap of the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::XorShiftRng;

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl BootstrapCi {
    /// The published comparator: non-overlapping 95% CIs count as
    /// significant (p < 0.05 in that convention).
    pub fn non_overlapping(&self, other: &BootstrapCi) -> bool {
        self.hi < other.lo || other.hi < self.lo
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn bootstrap_ci(
    values: &[f64],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    if values.is_empty() {
        return Err(Error::Data("bootstrap_ci: empty sample".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Usage(format!("CI level must be in (0,1), got {level}")));
    }
    if n_resamples == 0 {
        return Err(Error::Usage("n_resamples must be >= 1".into()));
    }
    let point = mean(values);
    let mut rng = XorShiftRng::new(XorShiftRng::derive(seed, "bootstrap"));
    let n = values.len();
    let mut means = Vec::with_capacity(n_resamples);
    let mut acc;
    for _ in 0..n_resamples {
        acc = 0.0;
        for _ in 0..n {
            acc += values[rng.next_below(n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = 1.0 - level;
    let lo_idx = ((alpha / 2.0) * (n_resamples - 1) as f64).round() as usize;
    let hi_idx = ((1.0 - alpha / 2.0) * (n_resamples - 1) as f64).round() as usize;
    // the percentile interval brackets the sample mean by construction for
    // any non-degenerate resample distribution; clamp for the edge cases
    let lo = means[lo_idx].min(point);
    let hi = means[hi_idx].max(point);
    Ok(BootstrapCi {
        point,
        lo,
        hi,
        n_resamples,
        level,
        seed,
    })
}
