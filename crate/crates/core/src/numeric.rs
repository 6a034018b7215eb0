//! Small numerical helpers shared by the estimators: pairwise summation,
//! mergeable moment accumulators and Gauss–Legendre rules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stochastics::RngStream;

/// Pairwise (cascade) summation. The result depends only on the slice
/// contents and order, never on how work was scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Running mean / variance (Welford), mergeable with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MomentAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * (self.count as f64) * (other.count as f64) / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn estimate(&self) -> McEstimate {
        McEstimate {
            mean: self.mean(),
            std_error: self.std_error(),
            samples: self.count,
        }
    }
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: u64,
}

/// Draws per independent substream. Fixed so that results do not depend on
/// the number of worker threads.
pub const MC_CHUNK: usize = 2048;

/// Splits `samples` draws into chunks of [`MC_CHUNK`], runs chunk `c` on
/// `rng.substream(c)` with its own `slots` accumulators, and merges the
/// chunk results in chunk order. The outcome is bit-identical for any
/// thread count.
pub fn chunked_accumulate<F>(rng: &RngStream, samples: usize, slots: usize, work: F) -> Result<Vec<MomentAccumulator>>
where
    F: Fn(&mut RngStream, usize, &mut [MomentAccumulator]) -> Result<()> + Sync,
{
    if samples == 0 {
        return Err(crate::error::MsdaError::Parameter("samples must be at least 1".into()));
    }
    let chunks = samples.div_ceil(MC_CHUNK);
    // bound memory: only `wave` chunk accumulators are alive at once
    let wave = rayon::current_num_threads().max(1);
    let mut total = vec![MomentAccumulator::new(); slots];
    let mut start = 0;
    while start < chunks {
        let end = (start + wave).min(chunks);
        let partial: Vec<Result<Vec<MomentAccumulator>>> = (start..end)
            .into_par_iter()
            .map(|c| {
                let mut sub = rng.substream(c as u64);
                let count = MC_CHUNK.min(samples - c * MC_CHUNK);
                let mut acc = vec![MomentAccumulator::new(); slots];
                work(&mut sub, count, &mut acc)?;
                Ok(acc)
            })
            .collect();
        for chunk in partial {
            for (t, c) in total.iter_mut().zip(&chunk?) {
                t.merge(c);
            }
        }
        start = end;
    }
    Ok(total)
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_{n-1}(x).
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Integrates `f` over `[lo, hi]` with an `n`-point Gauss–Legendre rule.
pub fn integrate_gl(f: impl Fn(f64) -> f64, lo: f64, hi: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let terms: Vec<f64> = rule
        .0
        .iter()
        .zip(&rule.1)
        .map(|(&t, &w)| w * f(mid + half * t))
        .collect();
    half * pairwise_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
    }

    #[test]
    fn accumulator_merge_equals_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let mut all = MomentAccumulator::new();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = MomentAccumulator::new();
        let mut b = MomentAccumulator::new();
        xs[..333].iter().for_each(|&x| a.push(x));
        xs[333..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_eq!(a.count(), all.count());
        assert!((a.mean() - all.mean()).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-9);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let rule = gauss_legendre(64);
        // degree 127 is the exactness limit; check a few lower degrees
        for deg in [0_i32, 1, 2, 7, 40, 99] {
            let got = integrate_gl(|x| x.powi(deg), 0.0, 1.0, &rule);
            let want = 1.0 / (deg as f64 + 1.0);
            assert!((got - want).abs() < 1e-13, "deg {deg}: {got} vs {want}");
        }
        let w: f64 = rule.1.iter().sum();
        assert!((w - 2.0).abs() < 1e-13);
    }

    #[test]
    fn single_node_rule_is_midpoint() {
        let rule = gauss_legendre(1);
        assert!(rule.0[0].abs() < 1e-15);
        assert!((rule.1[0] - 2.0).abs() < 1e-15);
    }
}
