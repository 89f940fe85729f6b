//! Paired comparison statistics over per-fold values.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::pipeline::features::quantile_sorted;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("all differences are zero")]
    AllZero,
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
}

const EXACT_LIMIT: usize = 12;

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::Length(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    let d = differences(a, b)?;
    if d.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: d.len() });
    }
    let dof = d.len() - 1;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, dof });
    }
    let sd = sample_std(&d);
    if sd == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let t = mean(&d) / (sd / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("positive dof");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, dof })
}

/// Average ranks (1-based) of `xs`, ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences.
    pub n: usize,
    pub p_two_sided: f64,
    /// One-sided p for `a > b`.
    pub p_greater: f64,
    pub exact: bool,
}

/// Wilcoxon signed-rank test on `a - b`. Zero differences are dropped and
/// ties get average ranks; the null distribution is enumerated exactly up to
/// 12 pairs and approximated by a tie-corrected normal above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon, StatsError> {
    let d: Vec<f64> = differences(a, b)?.into_iter().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::AllZero);
    }
    let n = d.len();
    let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_le, p_ge, exact) = if n <= EXACT_LIMIT {
        let (le, ge) = exact_tails(&ranks, w_plus);
        (le, ge, true)
    } else {
        let nf = n as f64;
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        for run in sorted.chunk_by(|x, y| x == y) {
            let t = run.len() as f64;
            ties += t * t * t - t;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = (w_plus - total / 2.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (normal.cdf(z), normal.sf(z), false)
    };
    Ok(Wilcoxon {
        w: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p_two_sided: (2.0 * p_le.min(p_ge)).min(1.0),
        p_greater: p_ge,
        exact,
    })
}

/// `P(W+ <= w)` and `P(W+ >= w)` under the sign-flip null, by counting
/// subsets of the (doubled, hence integral) ranks.
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (2.0 * w_plus).round() as usize;
    let total = (1u64 << ranks.len()) as f64;
    let le: u64 = counts[..=w].iter().sum();
    let ge: u64 = counts[w..].iter().sum();
    (le as f64 / total, ge as f64 / total)
}

/// Paired effect size `mean(a - b) / sd(a - b)`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let d = differences(a, b)?;
    if d.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: d.len() });
    }
    let sd = sample_std(&d);
    if sd == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(mean(&d) / sd)
}

/// Percentile bootstrap interval for the mean of `diffs`.
pub fn bootstrap_ci(diffs: &[f64], iterations: usize, level: f64, seed: u64) -> Result<(f64, f64), StatsError> {
    if diffs.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: diffs.len() });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Level(level));
    }
    if iterations == 0 {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    let mut rng = rng::keyed(seed, &[0xB007]);
    let n = diffs.len();
    let mut means: Vec<f64> = (0..iterations)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&means, alpha), quantile_sorted(&means, 1.0 - alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal as NormalDist};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    /// Enumerates every sign assignment of the given ranks.
    fn brute_force(ranks: &[f64], w_plus: f64) -> (f64, f64) {
        let n = ranks.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            le += (s <= w_plus + 1e-9) as u64;
            ge += (s >= w_plus - 1e-9) as u64;
        }
        let total = (1u64 << n) as f64;
        (le as f64 / total, ge as f64 / total)
    }

    #[test]
    fn t_reference_values() {
        // references from scipy.stats.ttest_1samp / ttest_rel
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert!(close(r.t, 4.242640687119285, 1e-12));
        assert!(close(r.p, 0.013235599563682695, 1e-6));
        assert_eq!(r.dof, 4);

        let d = [11.0, 6.0, -1.0, 21.0, 1.0, 19.0, 4.0, 15.0, 4.0, 10.0];
        let r = paired_t_test(&d, &[0.0; 10]).unwrap();
        assert!(close(r.t, 3.7881913495476183, 1e-12));
        assert!(close(r.p, 0.004294578201620266, 1e-6));

        let r = paired_t_test(&[0.3, -0.1, 0.25], &[0.0; 3]).unwrap();
        assert!(close(r.p, 0.35549661336451044, 1e-6));
    }

    #[test]
    fn t_edge_cases() {
        let a = [0.5, 0.6, 0.7];
        assert_eq!(paired_t_test(&a, &a).unwrap(), TTest { t: 0.0, p: 1.0, dof: 2 });
        assert_eq!(paired_t_test(&[2.0, 3.0], &[1.0, 2.0]), Err(StatsError::ZeroVariance));
        assert_eq!(paired_t_test(&[1.0], &[0.0]), Err(StatsError::TooFew { need: 2, got: 1 }));
        assert_eq!(paired_t_test(&[1.0, 2.0], &[0.0]), Err(StatsError::Length(2, 1)));
        let b = [0.1, 0.9, 0.2];
        let (x, y) = (paired_t_test(&a, &b).unwrap(), paired_t_test(&b, &a).unwrap());
        assert_eq!(x.t, -y.t);
        assert_eq!(x.p, y.p);
    }

    #[test]
    fn wilcoxon_tagged_examples() {
        let a: Vec<f64> = (1..=10).map(f64::from).collect();
        let w = wilcoxon_signed_rank(&a, &[0.0; 10]).unwrap();
        assert_eq!((w.w, w.w_plus), (0.0, 55.0));
        assert_eq!(w.p_greater, 1.0 / 1024.0);
        assert_eq!(w.p_two_sided, 2.0 / 1024.0);
        assert!(w.exact);

        let mut d = a.clone();
        d[0] = -1.0;
        let w = wilcoxon_signed_rank(&d, &[0.0; 10]).unwrap();
        assert_eq!(w.w, 1.0);
        assert_eq!(w.p_two_sided, 4.0 / 1024.0);

        assert_eq!(wilcoxon_signed_rank(&a, &a), Err(StatsError::AllZero));
    }

    #[test]
    fn wilcoxon_reference_values() {
        // scipy.stats.wilcoxon; the first fixture has a tie at |1|
        let d = [11.0, 6.0, -1.0, 21.0, 1.0, 19.0, 4.0, 15.0, 4.0, 10.0];
        let w = wilcoxon_signed_rank(&d, &[0.0; 10]).unwrap();
        assert_eq!(w.w, 1.5);
        assert_eq!(w.p_two_sided, 0.005859375);
        assert_eq!(w.p_greater, 0.0029296875);

        let d = [3.0, -12.0, 25.0, 7.0, -4.0, 19.0, 1.0, 33.0, -22.0, 8.0, 11.0, -6.0, 20.0, 9.0, 15.0];
        let w = wilcoxon_signed_rank(&d, &[0.0; 15]).unwrap();
        assert!(!w.exact);
        assert_eq!(w.w, 29.0);
        assert!(close(w.p_two_sided, 0.07829229414640984, 1e-9));

        let d = [3.0, -12.0, 25.0, 7.0, -4.0, 19.0, 1.0, 33.0, -22.0, 8.0, 11.0, -6.0, 20.0, 9.0, 15.0, 7.0, -3.0];
        let w = wilcoxon_signed_rank(&d, &[0.0; 17]).unwrap();
        assert_eq!(w.w, 37.5);
        assert!(close(w.p_two_sided, 0.06479012085481027, 1e-9));
    }

    #[test]
    fn wilcoxon_drops_zero_differences() {
        let a = [1.0, 2.0, 3.0, 5.0];
        let b = [1.0, 1.0, 1.0, 1.0];
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(w.n, 3);
        assert_eq!(w.p_greater, 1.0 / 8.0);
    }

    #[test]
    fn exact_matches_enumeration_on_integer_fixtures() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in 1..=10 {
            for _ in 0..40 {
                let d: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = rng.random_range(1..6) as f64;
                        if rng.random_bool(0.5) { v } else { -v }
                    })
                    .collect();
                let w = wilcoxon_signed_rank(&d, &vec![0.0; n]).unwrap();
                let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
                let (le, ge) = brute_force(&ranks, w.w_plus);
                assert_eq!(w.p_greater, ge, "{d:?}");
                assert_eq!(w.p_two_sided, (2.0 * le.min(ge)).min(1.0), "{d:?}");
            }
        }
    }

    #[test]
    fn cohens_d_examples() {
        let d = cohens_d(&[0.02, 0.06, 0.04, 0.08, 0.05], &[0.0; 5]).unwrap();
        assert!((d - 0.05 / 0.000_5f64.sqrt()).abs() < 1e-12);
        assert!((d - 2.236).abs() < 1e-3);
        assert_eq!(cohens_d(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]), Err(StatsError::ZeroVariance));

        let jitter = [0.01, -0.02, 0.015, 0.0, -0.005];
        let b = [0.4, 0.5, 0.45, 0.52, 0.48];
        let a: Vec<f64> = b.iter().zip(&jitter).map(|(x, j)| x + 0.1 + j).collect();
        let expected = (0.1 + mean(&jitter)) / sample_std(&jitter);
        assert!((cohens_d(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_degenerate_and_seeded() {
        assert_eq!(bootstrap_ci(&[0.3; 8], 10_000, 0.95, 1).unwrap(), (0.3, 0.3));
        let d = [0.1, -0.2, 0.05, 0.3, 0.0];
        assert_eq!(bootstrap_ci(&d, 2000, 0.95, 4).unwrap(), bootstrap_ci(&d, 2000, 0.95, 4).unwrap());
        assert_ne!(bootstrap_ci(&d, 2000, 0.95, 4).unwrap(), bootstrap_ci(&d, 2000, 0.95, 5).unwrap());
        assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
        assert!(bootstrap_ci(&d, 10, 1.0, 0).is_err());
    }

    #[test]
    fn bootstrap_coverage() {
        let dist = NormalDist::new(0.05, 0.04).unwrap();
        let mut covered = 0;
        for trial in 0..200u64 {
            let mut rng = rng::keyed(trial, &[0xC0]);
            let d: Vec<f64> = (0..10).map(|_| dist.sample(&mut rng)).collect();
            let (lo, hi) = bootstrap_ci(&d, 10_000, 0.95, trial).unwrap();
            covered += (lo <= 0.05 && 0.05 <= hi) as usize;
        }
        // the percentile interval covers about 90% at n = 10
        assert!(covered >= 170, "coverage {covered}/200");
        println!("bootstrap coverage {covered}/200");
    }

    proptest! {
        #[test]
        fn p_values_are_probabilities(a in prop::collection::vec(-1.0f64..1.0, 2..20), shift in -0.5f64..0.5) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.7 + shift + i as f64 * 1e-3).collect();
            if let Ok(t) = paired_t_test(&a, &b) {
                prop_assert!((0.0..=1.0).contains(&t.p));
            }
            if let Ok(w) = wilcoxon_signed_rank(&a, &b) {
                prop_assert!((0.0..=1.0).contains(&w.p_two_sided));
                prop_assert!((0.0..=1.0).contains(&w.p_greater));
                prop_assert!(w.w_plus + w.w_minus == (w.n * (w.n + 1)) as f64 / 2.0);
            }
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let (lo, hi) = bootstrap_ci(&d, 500, 0.95, 0).unwrap();
            prop_assert!(lo <= hi);
        }
    }
}
