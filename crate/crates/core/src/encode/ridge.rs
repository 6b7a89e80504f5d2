use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{center_columns, column_means, solve_spd};

/// Minimizes `‖XW − Y‖² + λ‖W‖²` column by column, without an intercept.
///
/// Uses the primal normal equations `(XᵀX + λI)⁻¹XᵀY` when `d ≤ n`, and the
/// equivalent dual form `Xᵀ(XXᵀ + λI)⁻¹Y` when `d > n` and `λ > 0`.
/// With `λ = 0` the system must have full column rank.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if y.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "X has {n} rows, Y has {}",
            y.nrows()
        )));
    }
    if n == 0 || d == 0 || y.ncols() == 0 {
        return Err(Error::InvalidArgument("ridge_solve on empty input".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("ridge_solve input contains NaN/Inf".into()));
    }

    if lambda == 0.0 {
        let sv = x.singular_values();
        let smax = sv.max();
        let tol = smax * (n.max(d) as f64) * f64::EPSILON;
        if d > n || sv.iter().any(|&s| s <= tol) {
            return Err(Error::Singular("XᵀX is singular and lambda = 0".into()));
        }
    }

    if d <= n || lambda == 0.0 {
        let mut gram = x.transpose() * x;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        solve_spd(gram, &(x.transpose() * y), "ridge normal equations")
    } else {
        let mut kernel = x * x.transpose();
        for i in 0..n {
            kernel[(i, i)] += lambda;
        }
        let alpha = solve_spd(kernel, y, "ridge dual system")?;
        Ok(x.transpose() * alpha)
    }
}

/// Ridge fit with an intercept obtained by centering.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// d × v.
    pub weights: DMatrix<f64>,
    /// Length v: `ȳ − x̄ᵀW`.
    pub intercept: DVector<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.weights.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "X has {} columns, weights expect {}",
                x.ncols(),
                self.weights.nrows()
            )));
        }
        let mut out = x * &self.weights;
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.intercept[j]);
        }
        Ok(out)
    }
}

/// Centers X and Y on their column means, solves the penalized problem on
/// the centered data and stores the implied intercept. The intercept is not
/// penalized.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeModel> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} rows, Y has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let mx = column_means(x);
    let my = column_means(y);
    let weights = ridge_solve(&center_columns(x, &mx), &center_columns(y, &my), lambda)?;
    let intercept = my - weights.transpose() * mx;
    Ok(RidgeModel { weights, intercept })
}
