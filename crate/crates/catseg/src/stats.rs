//! Mann-Whitney U rank test with midrank ties: exact enumeration for small
//! samples, tie-corrected normal approximation otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Product `n * m` up to which the exact permutation distribution is used.
pub const EXACT_LIMIT: usize = 64;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct UTestResult {
    /// U statistic of the first sample.
    pub u: f64,
    /// Tie-corrected normal approximation z value (continuity corrected).
    pub z: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Midranks of the pooled sample, in pooled order.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pooled[a].partial_cmp(&pooled[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0; // average of 1-based ranks i+1..=j+1
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p: probability over all `C(n+m, n)` assignments of pooled
/// positions to the first sample that `|U' - nm/2| >= |u - nm/2|`.
fn exact_p(ranks: &[f64], n: usize, u_obs: f64) -> f64 {
    let total_positions = ranks.len();
    let mid = (n * (total_positions - n)) as f64 / 2.0;
    let dev = (u_obs - mid).abs() - 1e-12;
    let base = (n * (n + 1)) as f64 / 2.0;

    let mut extreme = 0u64;
    let mut count = 0u64;
    // lexicographic combinations of `n` indices out of total_positions
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let rank_sum: f64 = idx.iter().map(|&i| ranks[i]).sum();
        let u = rank_sum - base;
        if (u - mid).abs() >= dev {
            extreme += 1;
        }
        count += 1;

        // advance
        let mut i = n;
        loop {
            if i == 0 {
                return extreme as f64 / count as f64;
            }
            i -= 1;
            if idx[i] != i + total_positions - n {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Rank-sum U test of two samples.
///
/// `u` is the statistic of sample `a`; swapping the samples maps it to
/// `n*m - u` with an identical p-value. When every pooled value is identical
/// the test degenerates to `p = 1`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<UTestResult> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::usage("mann_whitney_u: both samples must be nonempty"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::data("mann_whitney_u: non-finite sample value"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..n].iter().sum();
    let u = rank_sum_a - (n * (n + 1)) as f64 / 2.0;

    let total = (n + m) as f64;
    let mean = (n * m) as f64 / 2.0;

    // tie-corrected variance
    let mut tie_term = 0.0;
    {
        let mut sorted = pooled.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
    }
    let var = (n * m) as f64 / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));

    let (z, p_normal) = if var <= 0.0 {
        (0.0, 1.0)
    } else {
        let diff = u - mean;
        let correction = 0.5 * diff.signum();
        let z = (diff - correction) / var.sqrt();
        (z, (2.0 * normal_cdf(-z.abs())).clamp(f64::MIN_POSITIVE, 1.0))
    };

    let p = if var <= 0.0 {
        1.0
    } else if n * m <= EXACT_LIMIT {
        exact_p(&ranks, n, u).clamp(f64::MIN_POSITIVE, 1.0)
    } else {
        p_normal
    };

    Ok(UTestResult { u, z, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separated_pair_example() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_multisets_give_central_u() {
        let a = [5.0, 6.0, 7.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u, 4.5); // n*m/2
        assert!((r.p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn swapping_samples_mirrors_u_and_keeps_p() {
        let a = [1.0, 5.0, 2.5, 7.0];
        let b = [3.0, 3.0, 8.0];
        let r1 = mann_whitney_u(&a, &b).unwrap();
        let r2 = mann_whitney_u(&b, &a).unwrap();
        assert_eq!(r1.u + r2.u, (a.len() * b.len()) as f64);
        assert!((r1.p - r2.p).abs() < 1e-12);
    }

    #[test]
    fn constant_samples_degenerate_to_p_one() {
        let r = mann_whitney_u(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.p, 1.0);
        assert_eq!(r.z, 0.0);
    }

    #[test]
    fn empty_sample_is_usage_error() {
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn exact_and_normal_agree_for_medium_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0) + 0.1).collect();
            let r = mann_whitney_u(&a, &b).unwrap();
            let p_normal = (2.0 * normal_cdf(-r.z.abs())).min(1.0);
            assert!(
                (r.p - p_normal).abs() < 0.05,
                "exact {} vs normal {}",
                r.p,
                p_normal
            );
        }
    }

    #[test]
    fn strong_separation_is_significant() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..10).map(|i| i as f64 + 20.0).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert!(r.p < 0.001);
        assert_eq!(r.u, 0.0);
    }
}
