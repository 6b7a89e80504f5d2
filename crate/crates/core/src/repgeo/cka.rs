use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Unbiased HSIC estimator on Gram matrices with zeroed diagonals:
///
/// ```text
/// [tr(K̃L̃) + (1ᵀK̃1)(1ᵀL̃1) / ((n−1)(n−2)) − 2/(n−2) · 1ᵀK̃L̃1] / (n(n−3))
/// ```
pub fn hsic_unbiased(k: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<f64> {
    let n = k.nrows();
    if k.shape() != (n, n) || l.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "HSIC on Gram matrices {:?} and {:?}",
            k.shape(),
            l.shape()
        )));
    }
    if n < 4 {
        return Err(Error::InvalidArgument(format!("unbiased HSIC needs n >= 4, got {n}")));
    }
    let mut kt = k.clone();
    let mut lt = l.clone();
    kt.fill_diagonal(0.0);
    lt.fill_diagonal(0.0);
    let nf = n as f64;
    let trace = kt.component_mul(&lt).sum();
    let k_sums = kt.row_sum();
    let l_sums = lt.row_sum();
    let total = k_sums.sum() * l_sums.sum();
    let cross = k_sums.dot(&l_sums);
    Ok((trace + total / ((nf - 1.0) * (nf - 2.0)) - 2.0 * cross / (nf - 2.0)) / (nf * (nf - 3.0)))
}

/// Linear-kernel CKA with the unbiased HSIC estimator.
///
/// Fails when either self-HSIC is not positive (e.g. constant input).
pub fn cka_unbiased(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "CKA inputs have {} and {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    let kx = x * x.transpose();
    let ky = y * y.transpose();
    let xy = hsic_unbiased(&kx, &ky)?;
    let xx = hsic_unbiased(&kx, &kx)?;
    let yy = hsic_unbiased(&ky, &ky)?;
    // Centered constant kernels give zero up to rounding; compare against
    // the uncentered magnitude.
    let nf = x.nrows() as f64;
    let floor = |k: &DMatrix<f64>| 1e-12 * k.norm_squared() / (nf * (nf - 3.0));
    if !(xx > floor(&kx) && yy > floor(&ky)) {
        return Err(Error::Degenerate(format!(
            "self-HSIC is not positive ({xx:e}, {yy:e}); input has no usable variation"
        )));
    }
    Ok(xy / (xx.sqrt() * yy.sqrt()))
}
