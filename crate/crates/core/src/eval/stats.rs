use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::EvalError;

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Largest combined sample size for which the exact permutation p-value is
/// computed.
pub const EXACT_MAX_N: usize = 12;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear interpolation between order statistics of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean of `indicators`. The same seed
/// always yields the same interval.
pub fn bootstrap_ci(indicators: &[f64], alpha: f64, resamples: usize, seed: u64) -> Result<(f64, f64), EvalError> {
    if indicators.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    if resamples == 0 {
        return Err(EvalError::InvalidInput("resamples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = indicators.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| indicators[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok((quantile(&means, alpha / 2.0), quantile(&means, 1.0 - alpha / 2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, ties sharing the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Mann-Whitney U test. Exact over all splits of the pooled ranks
/// when the combined size is at most [`EXACT_MAX_N`]; otherwise the normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(EvalError::InvalidInput("samples contain NaN".into()));
    }
    let (n1, n2) = (a.len(), b.len());
    let n = n1 + n2;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let u_of = |rank_sum: f64| rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    let u = u_of(ranks[..n1].iter().sum());
    let centre = (n1 * n2) as f64 / 2.0;
    let observed = (u - centre).abs();

    if n <= EXACT_MAX_N {
        let (mut extreme, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let sum: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            total += 1;
            if (u_of(sum) - centre).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        return Ok(MannWhitney { u, p: extreme as f64 / total as f64, exact: true });
    }

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let ties: f64 = sorted
        .chunk_by(|x, y| x == y)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum();
    let nf = n as f64;
    let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - ties / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0, exact: false });
    }
    let z = (observed - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(MannWhitney { u, p, exact: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertSummary {
    pub n: usize,
    /// Counts for ratings 1 through 5.
    pub counts: [usize; 5],
    pub share_at_least_4: f64,
    pub mean: f64,
}

pub fn likert_summary(ratings: &[i64]) -> Result<LikertSummary, EvalError> {
    if ratings.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = [0usize; 5];
    for &r in ratings {
        if !(1..=5).contains(&r) {
            return Err(EvalError::RatingOutOfRange(r));
        }
        counts[(r - 1) as usize] += 1;
    }
    let n = ratings.len();
    Ok(LikertSummary {
        n,
        counts,
        share_at_least_4: (counts[3] + counts[4]) as f64 / n as f64,
        mean: mean(&ratings.iter().map(|&r| r as f64).collect::<Vec<_>>()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn bootstrap_is_seeded_and_collapses_on_constants() {
        assert_eq!(bootstrap_ci(&[1.0; 20], 0.05, 500, 7).unwrap(), (1.0, 1.0));
        let x: Vec<f64> = (0..50).map(|i| (i % 3 == 0) as u8 as f64).collect();
        assert_eq!(bootstrap_ci(&x, 0.05, 500, 1).unwrap(), bootstrap_ci(&x, 0.05, 500, 1).unwrap());
        assert_ne!(bootstrap_ci(&x, 0.05, 500, 1).unwrap(), bootstrap_ci(&x, 0.05, 500, 2).unwrap());
        assert_eq!(bootstrap_ci(&[], 0.05, 10, 0), Err(EvalError::Empty));
        assert!(bootstrap_ci(&x, 0.0, 10, 0).is_err());
    }

    #[test]
    fn bootstrap_width_shrinks_with_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect()
        };
        let small = draws(100, &mut rng);
        let large = draws(1000, &mut rng);
        let (sl, sh) = bootstrap_ci(&small, 0.05, 2000, 3).unwrap();
        let (ll, lh) = bootstrap_ci(&large, 0.05, 2000, 3).unwrap();
        assert!(ll <= 0.5 && 0.5 <= lh, "({ll}, {lh})");
        assert!(lh - ll < sh - sl);
        // Roughly 2 * 1.96 * sqrt(0.25 / 1000).
        assert!(((lh - ll) - 0.062).abs() < 0.01, "{}", lh - ll);
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p - 0.1).abs() < 1e-12 && r.exact);
        assert_eq!(mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().p, 1.0);
        let s = mann_whitney_u(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.u, s.p), (9.0, r.p));
        assert_eq!(mann_whitney_u(&[], &[1.0]), Err(EvalError::Empty));
    }

    #[test]
    fn normal_approximation_for_large_samples() {
        let a: Vec<f64> = (0..20).map(f64::from).collect();
        let b: Vec<f64> = (0..20).map(|x| f64::from(x) + 10.5).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert!(!r.exact);
        // U = 45 of 400; mean 200, sd sqrt(400 * 41 / 12), continuity 0.5.
        let z: f64 = (155.0 - 0.5) / (400.0 * 41.0 / 12.0f64).sqrt();
        let expected = 2.0 * (1.0 - Normal::standard().cdf(z));
        assert_eq!(r.u, 45.0);
        assert!((r.p - expected).abs() < 1e-12);
        let same = mann_whitney_u(&[1.0; 10], &[1.0; 10]).unwrap();
        assert_eq!(same.p, 1.0);
    }

    #[test]
    fn likert_examples() {
        let s = likert_summary(&[5, 5, 4, 2]).unwrap();
        assert_eq!(s.share_at_least_4, 0.75);
        assert_eq!(s.counts, [0, 1, 0, 1, 2]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(likert_summary(&[5; 7]).unwrap().share_at_least_4, 1.0);
        assert_eq!(likert_summary(&[3, 6]), Err(EvalError::RatingOutOfRange(6)));
        assert_eq!(likert_summary(&[0]), Err(EvalError::RatingOutOfRange(0)));
    }

    proptest! {
        #[test]
        fn mann_whitney_p_in_unit_interval_and_swap_symmetric(
            a in prop::collection::vec(0u8..6, 1..10),
            b in prop::collection::vec(0u8..6, 1..10),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let x = mann_whitney_u(&a, &b).unwrap();
            let y = mann_whitney_u(&b, &a).unwrap();
            prop_assert!(x.p > 0.0 && x.p <= 1.0);
            prop_assert!((x.p - y.p).abs() < 1e-12);
            prop_assert!((x.u + y.u - (a.len() * b.len()) as f64).abs() < 1e-9);
        }
    }
}
