//! Paired Wilcoxon signed-rank test, Bonferroni correction and ordinary
//! least squares with coefficient t-tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest effective sample size that uses the exact null distribution.
pub const DEFAULT_EXACT_THRESHOLD: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `min(W+, W−)`.
    pub statistic: f64,
    /// Sum of ranks of positive differences (`y − x > 0`).
    pub w_plus: f64,
    pub p: f64,
    pub n_effective: usize,
    /// Pairs dropped because their difference was zero.
    pub n_zero: usize,
    pub degenerate: bool,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`; entries within `1e-12 · max` of
/// each other count as tied.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] - values[order[end - 1]] <= 1e-12 * scale {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// `P(W+ ≤ t)` under the null by dynamic programming over subset sums of
/// doubled ranks (integers even with average-rank ties).
fn exact_lower_tail(ranks: &[f64], t: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * t).round() as usize;
    let hits: f64 = counts[..=limit.min(total)].iter().sum();
    hits / 2f64.powi(ranks.len() as i32)
}

/// Two-sided Wilcoxon signed-rank test on the differences `y − x`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult> {
    wilcoxon_signed_rank_with(x, y, DEFAULT_EXACT_THRESHOLD)
}

/// As [`wilcoxon_signed_rank`], with the exact/normal switch point given.
pub fn wilcoxon_signed_rank_with(x: &[f64], y: &[f64], exact_threshold: usize) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "paired samples of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("Wilcoxon input contains NaN/Inf".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    let n_zero = x.len() - diffs.len();
    let n = diffs.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            w_plus: 0.0,
            p: 1.0,
            n_effective: 0,
            n_zero,
            degenerate: true,
            method: WilcoxonMethod::None,
        });
    }
    if n < 5 {
        return Err(Error::InvalidArgument(format!(
            "Wilcoxon needs at least 5 nonzero differences, got {n}"
        )));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);

    let (p, method) = if n <= exact_threshold {
        ((2.0 * exact_lower_tail(&ranks, statistic)).min(1.0), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
            let t = j as f64;
            tie_term += t * t * t - t;
            i += j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let dev = ((statistic - mean).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * normal.sf(z)).min(1.0), WilcoxonMethod::Normal)
    };
    Ok(TestResult {
        statistic,
        w_plus,
        p: p.clamp(0.0, 1.0),
        n_effective: n,
        n_zero,
        degenerate: false,
        method,
    })
}

/// `min(1, m · p)` for each of the `m` p-values.
pub fn bonferroni(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvals.len() as f64;
    Ok(pvals.iter().map(|p| (p * m).min(1.0)).collect())
}

/// OLS fit with an intercept. Index 0 of every vector is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsResult {
    pub coefs: Vec<f64>,
    pub std_errs: Vec<f64>,
    /// `coef / std_err`; ±∞ for a nonzero coefficient on a perfect fit and 0
    /// for a zero one.
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r2: f64,
    pub adjusted_r2: f64,
    pub n: usize,
    /// Residual degrees of freedom `n − k − 1`.
    pub dof: usize,
}

pub fn ols_fit(x: &DMatrix<f64>, y: &[f64]) -> Result<OlsResult> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("design has {n} rows, outcome has {}", y.len())));
    }
    if n <= k + 1 {
        return Err(Error::InvalidArgument(format!(
            "OLS needs more than k + 1 = {} observations, got {n}",
            k + 1
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("OLS input contains NaN/Inf".into()));
    }
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let svd = design.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::Singular(format!(
            "design matrix (with intercept) is rank deficient: singular values {smax:e} .. {smin:e}"
        )));
    }
    let yv = DVector::from_column_slice(y);
    let qr = design.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let resid = &yv - &design * &beta;
    let rss = resid.norm_squared();
    let mean_y = yv.mean();
    let tss: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    if tss == 0.0 {
        return Err(Error::Degenerate("outcome is constant; R² is undefined".into()));
    }
    let dof = n - k - 1;
    let sigma2 = rss / dof as f64;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("R factor is not invertible".into()))?;
    let cov_unscaled = &r_inv * r_inv.transpose();
    let t_dist = StudentsT::new(0.0, 1.0, dof as f64).expect("positive dof");

    let coefs: Vec<f64> = beta.iter().copied().collect();
    let std_errs: Vec<f64> = (0..=k).map(|j| (sigma2 * cov_unscaled[(j, j)]).max(0.0).sqrt()).collect();
    let t_stats: Vec<f64> = coefs
        .iter()
        .zip(&std_errs)
        .map(|(&c, &s)| {
            if s > 0.0 {
                c / s
            } else if c == 0.0 {
                0.0
            } else {
                c.signum() * f64::INFINITY
            }
        })
        .collect();
    let p_values = t_stats.iter().map(|t| (2.0 * t_dist.sf(t.abs())).clamp(0.0, 1.0)).collect();
    let r2 = 1.0 - rss / tss;
    let adjusted_r2 = 1.0 - (1.0 - r2) * (n - 1) as f64 / dof as f64;
    Ok(OlsResult {
        coefs,
        std_errs,
        t_stats,
        p_values,
        r2,
        adjusted_r2,
        n,
        dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Enumerates all 2ⁿ sign assignments over the observed ranks and counts
    /// those whose min(W+, W−) is at most the observed one.
    fn enumeration_p(x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
        let n = d.len();
        let mut abs: Vec<(f64, usize)> = d.iter().map(|v| v.abs()).zip(0..).collect();
        abs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && abs[j + 1].0 == abs[i].0 {
                j += 1;
            }
            for item in &abs[i..=j] {
                ranks[item.1] = (i + j + 2) as f64 / 2.0;
            }
            i = j + 1;
        }
        let total: f64 = ranks.iter().sum();
        let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let obs_min = observed.min(total - observed);
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let wp: f64 = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| ranks[b]).sum();
            if wp.min(total - wp) <= obs_min + 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn constant_shift_hits_minimum_p() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.37).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 1.5).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p - 2.0 / 1024.0).abs() < 1e-15);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_signed_rank(&x, &x).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.p, r.n_effective, r.n_zero), (1.0, 0, 6));
    }

    #[test]
    fn exact_path_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..60 {
            let n = rng.random_range(5..=12);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            // Integer-valued data produces tied and zero differences.
            let y: Vec<f64> = if trial % 2 == 0 {
                (0..n).map(|_| rng.random_range(0..6) as f64).collect()
            } else {
                x.iter().map(|v| v + rng.random_range(-1.0..1.5)).collect()
            };
            match wilcoxon_signed_rank(&x, &y) {
                Ok(r) if !r.degenerate => {
                    let oracle = enumeration_p(&x, &y);
                    assert!((r.p - oracle).abs() < 1e-9, "trial {trial}: {} vs {oracle}", r.p);
                }
                Ok(_) => {}
                Err(e) => assert!(matches!(e, Error::InvalidArgument(_))),
            }
        }
    }

    #[test]
    fn normal_approximation_agrees_with_exact_near_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..25).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v: &f64| v + 0.4 + rng.random_range(-1.0..1.0)).collect();
        let exact = wilcoxon_signed_rank_with(&x, &y, 25).unwrap();
        let approx = wilcoxon_signed_rank_with(&x, &y, 24).unwrap();
        assert_eq!(approx.method, WilcoxonMethod::Normal);
        assert_eq!(exact.statistic, approx.statistic);
        assert!((exact.p - approx.p).abs() < 0.01, "{} vs {}", exact.p, approx.p);
    }

    #[test]
    fn affine_transform_leaves_result_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [8, 40] {
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = x.iter().map(|v: &f64| v + rng.random_range(-0.5..1.0)).collect();
            let a = wilcoxon_signed_rank(&x, &y).unwrap();
            let tx: Vec<f64> = x.iter().map(|v| 2.5 * v - 3.0).collect();
            let ty: Vec<f64> = y.iter().map(|v| 2.5 * v - 3.0).collect();
            let b = wilcoxon_signed_rank(&tx, &ty).unwrap();
            assert_eq!(a.statistic, b.statistic);
            assert_eq!(a.p, b.p);
        }
    }

    #[test]
    fn wilcoxon_errors() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[2.0, 3.0, 5.0]).is_err());
    }

    #[test]
    fn bonferroni_cases() {
        assert_eq!(bonferroni(&[0.01, 0.04]).unwrap(), vec![0.02, 0.08]);
        assert_eq!(bonferroni(&[0.3]).unwrap(), vec![0.3]);
        assert_eq!(bonferroni(&[0.6, 0.2]).unwrap(), vec![1.0, 0.4]);
        assert!(bonferroni(&[1.2]).is_err());
        assert!(bonferroni(&[-0.1]).is_err());
    }

    #[test]
    fn ols_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..30).map(|i| 0.5 - 0.89 * x[(i, 0)] - 0.17 * x[(i, 1)]).collect();
        let fit = ols_fit(&x, &y).unwrap();
        assert!((fit.adjusted_r2 - 1.0).abs() < 1e-9);
        for (got, want) in fit.coefs.iter().zip([0.5, -0.89, -0.17]) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (n, k) = (rng.random_range(6..40), rng.random_range(1..4));
            let x = DMatrix::from_fn(n, k, |_, _| rng.random_range(-2.0..2.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            if n <= k + 1 {
                continue;
            }
            let fit = ols_fit(&x, &y).unwrap();
            let design = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
            let xtx = design.transpose() * &design;
            let beta = xtx.clone().try_inverse().unwrap() * design.transpose() * DVector::from_column_slice(&y);
            for j in 0..=k {
                assert!((fit.coefs[j] - beta[j]).abs() < 1e-8);
                assert!((fit.t_stats[j] - fit.coefs[j] / fit.std_errs[j]).abs() < 1e-9);
            }
            assert!(fit.adjusted_r2 <= 1.0);
        }
    }

    #[test]
    fn ols_null_has_small_adjusted_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DMatrix::from_fn(500, 2, |_, _| StandardNormal.sample(&mut rng));
        let y: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ols_fit(&x, &y).unwrap().adjusted_r2.abs() < 0.1);
    }

    #[test]
    fn ols_errors() {
        let x = DMatrix::from_fn(5, 2, |i, j| (i + j) as f64);
        assert!(matches!(ols_fit(&x, &[1.0, 2.0, 3.0, 4.0, 6.0]), Err(Error::Singular(_))));
        let x = DMatrix::from_fn(3, 2, |i, j| (i * j) as f64);
        assert!(ols_fit(&x, &[1.0, 2.0, 3.0]).is_err());
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
        assert!(matches!(ols_fit(&x, &[2.0; 6]), Err(Error::Degenerate(_))));
    }
}
