//! Sample means and standard errors with reductions that do not depend on
//! the thread count.
//!
//! Every sum over paths is split into fixed-size chunks; chunk partials are
//! computed in parallel and folded in chunk order, so results are bitwise
//! identical whatever the rayon pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Rows per reduction chunk. Part of the reproducibility contract.
pub const CHUNK: usize = 4096;

/// Sum of `values` in a fixed chunked order.
pub fn ordered_sum(values: &[f64]) -> f64 {
    values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Sum of `f(i)` for `i in 0..n`, with the same chunking as [`ordered_sum`].
pub fn ordered_sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..end).map(&f).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            se: 0.0,
            count: 1,
        }
    }

    /// Mean and standard error of the sample mean of `values`.
    pub fn from_samples(values: &[f64]) -> Self {
        Self::from_fn(values.len(), |i| values[i])
    }

    pub fn from_fn<F>(n: usize, f: F) -> Self
    where
        F: Fn(usize) -> f64 + Sync,
    {
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                count: 0,
            };
        }
        let mean = ordered_sum_by(n, &f) / n as f64;
        let se = if n > 1 {
            let ss = ordered_sum_by(n, |i| {
                let d = f(i) - mean;
                d * d
            });
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, count: n }
    }

    /// Standard error of the difference of two estimates, treated as independent.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.se.hypot(other.se)
    }

    /// `true` when `|mean - target| <= k * se`, with `floor` as an absolute
    /// minimum tolerance for estimates whose standard error vanishes.
    pub fn within(&self, target: f64, k: f64, floor: f64) -> bool {
        (self.mean - target).abs() <= (k * self.se).max(floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se_of_known_sample() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((e.se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ordered_sum_is_pool_independent() {
        let v: Vec<f64> = (0..50_000)
            .map(|i| ((i * 7919) % 1000) as f64 * 1e-3)
            .collect();
        let a = ordered_sum(&v);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let b = pool.install(|| ordered_sum(&v));
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), ordered_sum_by(v.len(), |i| v[i]).to_bits());
    }

    #[test]
    fn constant_sample_has_zero_se() {
        let e = Estimate::from_samples(&[0.5; 100]);
        assert_eq!(e.se, 0.0);
        assert!(e.within(0.5, 3.0, 1e-8));
    }
}
