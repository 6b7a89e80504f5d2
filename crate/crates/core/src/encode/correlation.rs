use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Floor substituted for zero p-values before taking logs.
pub const DEFAULT_P_FLOOR: f64 = 1e-300;

/// Alternative hypothesis for correlation p-values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sided {
    #[default]
    Two,
    /// H1: r > 0.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pearson {
    pub r: f64,
    pub p: f64,
    /// One of the inputs was constant; `r` is reported as 0 and `p` as 1.
    pub degenerate: bool,
}

/// Pearson correlation with a two-sided t-test (n − 2 degrees of freedom).
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Pearson> {
    pearson_r_sided(x, y, Sided::Two)
}

pub fn pearson_r_sided(x: &[f64], y: &[f64], sided: Sided) -> Result<Pearson> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "pearson_r on vectors of length {n} and {}",
            y.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "pearson_r needs at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let scale_x = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale_y = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let flat = |ss: f64, scale: f64| ss.sqrt() <= 1e-12 * scale * nf.sqrt() || ss == 0.0;
    if flat(sxx, scale_x) || flat(syy, scale_y) {
        return Ok(Pearson {
            r: 0.0,
            p: 1.0,
            degenerate: true,
        });
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p_two = two_sided_p(r, n);
    let p = match sided {
        Sided::Two => p_two,
        Sided::Greater if r > 0.0 => p_two / 2.0,
        Sided::Greater => 1.0 - p_two / 2.0,
    };
    Ok(Pearson {
        r,
        p,
        degenerate: false,
    })
}

/// P(|T| ≥ |t|) for the t statistic of `r`, via the regularized incomplete beta.
fn two_sided_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    // t² / (df + t²) simplifies to r², so x = df / (df + t²) = 1 − r².
    beta_reg(df / 2.0, 0.5, one_minus).clamp(0.0, 1.0)
}

/// Upper tail of χ² with `2m` degrees of freedom at `x`, in closed form:
/// `exp(−x/2) Σ_{k<m} (x/2)^k / k!`, summed in log space.
pub fn chi2_even_sf(x: f64, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    if x <= 0.0 {
        return 1.0;
    }
    let h = x / 2.0;
    let ln_h = h.ln();
    let mut log_terms = Vec::with_capacity(m);
    let mut ln_fact = 0.0;
    for k in 0..m {
        if k > 0 {
            ln_fact += (k as f64).ln();
        }
        log_terms.push(-h + k as f64 * ln_h - ln_fact);
    }
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherOutcome {
    pub p: f64,
    pub statistic: f64,
    /// How many inputs were exactly zero and replaced by the floor.
    pub clamped: usize,
}

/// Fisher's method with the default zero-p floor.
pub fn fisher_combine(pvals: &[f64]) -> Result<f64> {
    Ok(fisher_combine_with_floor(pvals, DEFAULT_P_FLOOR)?.p)
}

pub fn fisher_combine_with_floor(pvals: &[f64], floor: f64) -> Result<FisherOutcome> {
    if pvals.is_empty() {
        return Err(Error::InvalidArgument("fisher_combine needs at least one p-value".into()));
    }
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::InvalidArgument(format!("p floor {floor} outside (0, 1]")));
    }
    let mut clamped = 0;
    let mut statistic = 0.0;
    for &p in pvals {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
        }
        let p = if p < floor {
            clamped += 1;
            floor
        } else {
            p
        };
        statistic -= 2.0 * p.ln();
    }
    if clamped > 0 {
        log::warn!("fisher_combine: {clamped} p-value(s) below {floor:e} clamped to the floor");
    }
    Ok(FisherOutcome {
        p: chi2_even_sf(statistic, pvals.len()),
        statistic,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

    /// Textbook formula: r = cov / (sd_x sd_y) with single-pass sums;
    /// p = 2 (1 − F_t(|t|)) with t = r √(df / (1 − r²)).
    fn textbook(x: &[f64], y: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let df = n - 2.0;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        (r, 2.0 * (1.0 - dist.cdf(t.abs())))
    }

    #[test]
    fn perfect_and_reversed() {
        let p = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((p.r - 1.0).abs() < 1e-15);
        assert!(p.p < 1e-6);
        let p = pearson_r(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((p.r + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let p = pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((p.r, p.p, p.degenerate), (0.0, 1.0, true));
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random_range(-1.0..1.0)).collect();
            let got = pearson_r(&x, &y).unwrap();
            let (r, p) = textbook(&x, &y);
            assert!((got.r - r).abs() < 1e-10, "{} vs {}", got.r, r);
            assert!((got.p - p).abs() < 1e-6, "{} vs {}", got.p, p);
        }
    }

    #[test]
    fn one_sided_halves_in_direction() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.2, 1.9, 3.5, 3.9, 5.5, 5.0];
        let two = pearson_r(&x, &y).unwrap();
        let up = pearson_r_sided(&x, &y, Sided::Greater).unwrap();
        assert!((up.p - two.p / 2.0).abs() < 1e-15);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let down = pearson_r_sided(&x, &neg, Sided::Greater).unwrap();
        assert!((down.p - (1.0 - two.p / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn fisher_identities() {
        assert_eq!(fisher_combine(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((fisher_combine(&[0.05]).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn fisher_matches_chi_squared_survival() {
        let ps = [0.1, 0.2, 0.3];
        let x: f64 = -2.0 * ps.iter().map(|p: &f64| p.ln()).sum::<f64>();
        let reference = 1.0 - ChiSquared::new(6.0).unwrap().cdf(x);
        assert!((fisher_combine(&ps).unwrap() - reference).abs() < 1e-9);
    }

    #[test]
    fn fisher_zero_and_out_of_range() {
        let out = fisher_combine_with_floor(&[0.0, 0.5], DEFAULT_P_FLOOR).unwrap();
        assert_eq!(out.clamped, 1);
        assert!(out.p > 0.0 && out.p < 1e-290);
        assert!(fisher_combine(&[1.2]).is_err());
        assert!(fisher_combine(&[-0.1]).is_err());
        assert!(fisher_combine(&[]).is_err());
    }

    #[test]
    fn fisher_decreases_with_copies() {
        // m copies of p combine to P(Poisson(−m ln p) < m). That tends to 0
        // only for p < 1/e, and falls at every step only for p well below it
        // (p = 0.3 already rises from m = 1 to m = 2).
        for &p in &[1e-4, 0.01, 0.05, 0.1, 0.2] {
            let mut prev = 1.0;
            for m in 1..60 {
                let c = fisher_combine(&vec![p; m]).unwrap();
                assert!(c < prev, "p={p} m={m}: {c} !< {prev}");
                prev = c;
            }
        }
        let rising: Vec<f64> = (1..5).map(|m| fisher_combine(&vec![0.6; m]).unwrap()).collect();
        assert!(rising.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn chi2_closed_form_matches_gamma_route() {
        for &(x, m) in &[(0.5, 1), (3.0, 2), (10.0, 5), (40.0, 20), (200.0, 90)] {
            let reference = 1.0 - ChiSquared::new(2.0 * m as f64).unwrap().cdf(x);
            assert!((chi2_even_sf(x, m) - reference).abs() < 1e-9, "x={x} m={m}");
        }
    }
}
