use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::correlation::{fisher_combine_with_floor, pearson_r_sided, Sided, DEFAULT_P_FLOOR};
use super::folds::FoldSpec;
use super::ridge::ridge_fit;
use crate::error::{Error, Result};
use crate::linalg::{mean, median};
use crate::tensorio::{zscore_apply, zscore_fit, ActivationTensor, ResponseMatrix};

/// Grid searched when no explicit grid is configured but a search is requested.
pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub lambda: f64,
    /// When present, λ is chosen from this grid by mean cross-validated
    /// fold correlation and `lambda` is ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub p_sided: Sided,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            lambda_grid: None,
            p_sided: Sided::Two,
        }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return Err(Error::InvalidArgument("lambda grid is empty".into()));
            }
            if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
                return Err(Error::InvalidArgument(format!("lambda grid entry {bad} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub mean_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// k_folds × n_voxels.
    pub per_voxel_r: Vec<Vec<f64>>,
    pub fold_mean_r: Vec<f64>,
    /// Fisher-combined voxel p-values per fold.
    pub fold_p: Vec<f64>,
    pub mean_r: f64,
    pub median_fold_p: f64,
    pub ceiling: f64,
    pub brain_score: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid_scores: Option<Vec<GridPoint>>,
    /// Voxels per fold whose prediction or observation was constant.
    pub degenerate_voxels: Vec<usize>,
    /// Voxel p-values of exactly zero clamped before Fisher combination.
    pub clamped_p: usize,
    pub p_sided: Sided,
    pub fold_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

struct FoldOutcome {
    r: Vec<f64>,
    mean_r: f64,
    p: f64,
    degenerate: usize,
    clamped: usize,
}

fn run_fold(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    folds: &FoldSpec,
    fold: usize,
    lambda: f64,
    sided: Sided,
) -> Result<FoldOutcome> {
    let (train, test) = (folds.train_indices(fold), folds.test_indices(fold));
    let (x_tr, x_te) = (x.select_rows(&train), x.select_rows(&test));
    let (y_tr, y_te) = (y.select_rows(&train), y.select_rows(&test));

    let sx = zscore_fit(&x_tr)?;
    let sy = zscore_fit(&y_tr)?;
    let (x_tr, x_te) = (zscore_apply(&sx, &x_tr)?, zscore_apply(&sx, &x_te)?);
    let (y_tr, y_te) = (zscore_apply(&sy, &y_tr)?, zscore_apply(&sy, &y_te)?);

    let model = ridge_fit(&x_tr, &y_tr, lambda)?;
    let pred = model.predict(&x_te)?;

    let mut r = Vec::with_capacity(y.ncols());
    let mut p = Vec::with_capacity(y.ncols());
    let mut degenerate = 0;
    for (cp, co) in pred.column_iter().zip(y_te.column_iter()) {
        let pr = pearson_r_sided(cp.as_slice(), co.as_slice(), sided)?;
        degenerate += usize::from(pr.degenerate);
        r.push(pr.r);
        p.push(pr.p);
    }
    let fisher = fisher_combine_with_floor(&p, DEFAULT_P_FLOOR)?;
    Ok(FoldOutcome {
        mean_r: mean(&r),
        r,
        p: fisher.p,
        degenerate,
        clamped: fisher.clamped,
    })
}

fn cross_validate(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    folds: &FoldSpec,
    lambda: f64,
    sided: Sided,
) -> Result<Vec<FoldOutcome>> {
    // Folds are independent; collect preserves fold order.
    (0..folds.k)
        .into_par_iter()
        .map(|f| run_fold(x, y, folds, f, lambda, sided))
        .collect()
}

/// Cross-validated ridge encoding score of responses `y` from activations `x`.
///
/// Per fold: both sides are z-scored with training-row statistics, ridge is
/// fit on the training rows and evaluated on the held-out rows with voxel-wise
/// Pearson r; voxel p-values are Fisher-combined into a fold p-value. The
/// brain score is the mean over folds of the voxel-averaged r divided by
/// `ceiling`.
pub fn brain_score(
    x: &ActivationTensor,
    y: &ResponseMatrix,
    folds: &FoldSpec,
    cfg: &RidgeConfig,
    ceiling: f64,
) -> Result<ScoreReport> {
    cfg.validate()?;
    if !(ceiling > 0.0 && ceiling.is_finite()) {
        return Err(Error::InvalidArgument(format!("ceiling must be > 0, got {ceiling}")));
    }
    let n = x.n_stimuli();
    if y.n_stimuli() != n || folds.n_items != n {
        return Err(Error::DimensionMismatch(format!(
            "activations have {n} stimuli, responses {}, folds {}",
            y.n_stimuli(),
            folds.n_items
        )));
    }
    let sizes = folds.sizes();
    let (min_test, min_train) = (
        *sizes.iter().min().unwrap(),
        n - *sizes.iter().max().unwrap(),
    );
    if min_test < 3 || min_train < 2 {
        return Err(Error::InvalidArgument(format!(
            "{n} stimuli are too few for {} folds (need >= 3 test and >= 2 train rows per fold)",
            folds.k
        )));
    }

    let (xf, yf) = (x.to_f64(), y.to_f64());
    let mut notes = Vec::new();

    let (lambda, grid_scores, outcomes) = match &cfg.lambda_grid {
        None => (cfg.lambda, None, cross_validate(&xf, &yf, folds, cfg.lambda, cfg.p_sided)?),
        Some(grid) => {
            let mut best: Option<(f64, f64, Vec<FoldOutcome>)> = None;
            let mut points = Vec::with_capacity(grid.len());
            for &lambda in grid {
                let outcome = cross_validate(&xf, &yf, folds, lambda, cfg.p_sided)?;
                let score = mean(&outcome.iter().map(|o| o.mean_r).collect::<Vec<_>>());
                points.push(GridPoint { lambda, mean_r: score });
                // Strict improvement only: ties keep the earlier grid entry.
                if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                    best = Some((lambda, score, outcome));
                }
            }
            notes.push(
                "lambda selected on the same folds used for scoring; the reported score is optimistically biased"
                    .to_string(),
            );
            let (lambda, _, outcome) = best.expect("grid is non-empty");
            (lambda, Some(points), outcome)
        }
    };

    let fold_mean_r: Vec<f64> = outcomes.iter().map(|o| o.mean_r).collect();
    let fold_p: Vec<f64> = outcomes.iter().map(|o| o.p).collect();
    let mean_r = mean(&fold_mean_r);
    let degenerate_voxels: Vec<usize> = outcomes.iter().map(|o| o.degenerate).collect();
    if degenerate_voxels.iter().any(|&d| d > 0) {
        notes.push(format!(
            "constant prediction or observation in {} voxel-fold cells scored as r = 0, p = 1",
            degenerate_voxels.iter().sum::<usize>()
        ));
    }

    Ok(ScoreReport {
        per_voxel_r: outcomes.iter().map(|o| o.r.clone()).collect(),
        median_fold_p: median(&fold_p),
        fold_mean_r,
        fold_p,
        mean_r,
        ceiling,
        brain_score: mean_r / ceiling,
        lambda,
        lambda_grid_scores: grid_scores,
        degenerate_voxels,
        clamped_p: outcomes.iter().map(|o| o.clamped).sum(),
        p_sided: cfg.p_sided,
        fold_seed: folds.seed,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::super::folds::make_folds;
    use super::*;
    use crate::tensorio::{Condition, Unit};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
    }

    fn act(m: &DMatrix<f64>) -> ActivationTensor {
        ActivationTensor::new(m.map(|v| v as f32), "m", Unit::Layer, 0, Condition::Pos).unwrap()
    }

    fn resp(m: &DMatrix<f64>) -> ResponseMatrix {
        ResponseMatrix::new(m.map(|v| v as f32), "s", None).unwrap()
    }

    #[test]
    fn noiseless_linear_map_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(100, 6, &mut rng);
        let y = &x * gaussian(6, 12, &mut rng);
        let folds = make_folds(100, 5, 1).unwrap();
        let cfg = RidgeConfig { lambda: 1e-8, ..RidgeConfig::default() };
        let rep = brain_score(&act(&x), &resp(&y), &folds, &cfg, 1.0).unwrap();
        assert!((rep.brain_score - 1.0).abs() < 1e-3, "{}", rep.brain_score);
        assert_eq!(rep.per_voxel_r.len(), 5);
        assert_eq!(rep.per_voxel_r[0].len(), 12);
        assert!(rep.median_fold_p < 1e-10);
    }

    #[test]
    fn report_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(60, 4, &mut rng);
        let y = &x * gaussian(4, 5, &mut rng) + gaussian(60, 5, &mut rng) * 2.0;
        let folds = make_folds(60, 5, 2).unwrap();
        let rep = brain_score(&act(&x), &resp(&y), &folds, &RidgeConfig::default(), 0.32).unwrap();
        let m = rep.fold_mean_r.iter().sum::<f64>() / 5.0;
        assert!((rep.mean_r - m).abs() < 1e-9);
        assert!((rep.brain_score - rep.mean_r / 0.32).abs() < 1e-9);
        assert!(rep.per_voxel_r.iter().flatten().all(|r| (-1.0..=1.0).contains(r)));
        assert!(rep.fold_p.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(rep.fold_seed, Some(2));
    }

    #[test]
    fn shuffled_stimuli_score_near_zero() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = gaussian(243, 10, &mut rng);
            let y = &x * gaussian(10, 50, &mut rng) + gaussian(243, 50, &mut rng);
            let mut perm: Vec<usize> = (0..243).collect();
            perm.shuffle(&mut rng);
            let shuffled = x.select_rows(&perm);
            let folds = make_folds(243, 5, seed).unwrap();
            let rep =
                brain_score(&act(&shuffled), &resp(&y), &folds, &RidgeConfig::default(), 1.0).unwrap();
            assert!(rep.brain_score.abs() < 0.1, "seed {seed}: {}", rep.brain_score);
        }
    }

    #[test]
    fn column_rescaling_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(80, 5, &mut rng);
        let y = &x * gaussian(5, 6, &mut rng) + gaussian(80, 6, &mut rng);
        let scales = [0.5, 3.0, 10.0, 0.01, 7.0];
        let scaled = DMatrix::from_fn(80, 5, |i, j| x[(i, j)] * scales[j]);
        let folds = make_folds(80, 5, 4).unwrap();
        let cfg = RidgeConfig::default();
        let a = brain_score(&act(&x), &resp(&y), &folds, &cfg, 1.0).unwrap();
        let b = brain_score(&act(&scaled), &resp(&y), &folds, &cfg, 1.0).unwrap();
        assert!((a.brain_score - b.brain_score).abs() < 1e-6);
    }

    #[test]
    fn grid_picks_best_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(50, 40, &mut rng);
        let y = &x.columns(0, 2) * gaussian(2, 4, &mut rng) + gaussian(50, 4, &mut rng);
        let folds = make_folds(50, 5, 0).unwrap();
        let cfg = RidgeConfig {
            lambda_grid: Some(DEFAULT_LAMBDA_GRID.to_vec()),
            ..RidgeConfig::default()
        };
        let rep = brain_score(&act(&x), &resp(&y), &folds, &cfg, 1.0).unwrap();
        let points = rep.lambda_grid_scores.as_ref().unwrap();
        let best = points.iter().map(|p| p.mean_r).fold(f64::MIN, f64::max);
        assert!((rep.mean_r - best).abs() < 1e-12);
        assert!(points.iter().any(|p| p.lambda == rep.lambda));
        assert!(!rep.notes.is_empty());
    }

    #[test]
    fn dead_voxel_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian(40, 3, &mut rng);
        let mut y = &x * gaussian(3, 3, &mut rng);
        y.column_mut(1).fill(4.0);
        let folds = make_folds(40, 5, 0).unwrap();
        let rep = brain_score(&act(&x), &resp(&y), &folds, &RidgeConfig::default(), 1.0).unwrap();
        assert!(rep.degenerate_voxels.iter().all(|&d| d == 1));
        assert!(rep.per_voxel_r.iter().all(|fold| fold[1] == 0.0));
    }

    #[test]
    fn too_few_rows_or_bad_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian(10, 2, &mut rng);
        let y = gaussian(10, 2, &mut rng);
        let folds = make_folds(10, 5, 0).unwrap();
        assert!(brain_score(&act(&x), &resp(&y), &folds, &RidgeConfig::default(), 1.0).is_err());
        let folds = make_folds(10, 2, 0).unwrap();
        assert!(brain_score(&act(&x), &resp(&y), &folds, &RidgeConfig::default(), 0.0).is_err());
        let bad = RidgeConfig { lambda_grid: Some(vec![]), ..RidgeConfig::default() };
        assert!(brain_score(&act(&x), &resp(&y), &folds, &bad, 1.0).is_err());
    }
}
