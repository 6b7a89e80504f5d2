//! Cross-validated encoding analysis.
//!
//! Voxel selection by split-half reliability, fold construction, ridge
//! regression, voxel-wise Pearson scoring, Fisher combination of voxel
//! p-values, the leave-one-subject-out noise ceiling and the resulting
//! ceiling-normalized brain score.

mod correlation;
mod folds;
mod reliability;
mod ridge;
mod score;

pub use correlation::{
    fisher_combine, fisher_combine_with_floor, pearson_r, pearson_r_sided, chi2_even_sf,
    FisherOutcome, Pearson, Sided, DEFAULT_P_FLOOR,
};
pub use folds::{make_folds, FoldSpec};
pub use reliability::{
    noise_ceiling, noise_ceiling_per_subject, reliability_select, ReliabilitySelection,
};
pub use ridge::{ridge_fit, ridge_solve, RidgeModel};
pub use score::{brain_score, GridPoint, RidgeConfig, ScoreReport, DEFAULT_LAMBDA_GRID};
