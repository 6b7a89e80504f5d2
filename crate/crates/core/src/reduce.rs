//! Principal component analysis.
//!
//! Columns are centered but not scaled. When the data has more columns than
//! rows (whole-brain voxel counts) the eigenproblem is solved on the n × n
//! Gram matrix instead of the d × d covariance.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center_columns, column_means};
use crate::tensorio::{load_raw, save_raw, EntryMeta};

/// A fitted PCA projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// k × d, orthonormal rows ordered by decreasing variance.
    pub components: DMatrix<f64>,
    /// Eigenvalues of the sample covariance (divisor n − 1), length k.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Numerical rank of the centered data.
    pub rank: usize,
    /// Set when k exceeds the rank: the trailing components are an arbitrary
    /// orthonormal completion and their ratios are zero.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.n_components() {
            return Err(Error::DimensionMismatch(format!(
                "scores have {} columns, model has {} components",
                z.ncols(),
                self.n_components()
            )));
        }
        let mut x = z * &self.components;
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mean[j]);
        }
        Ok(x)
    }

    /// Writes `<prefix>.mean` (1 × d), `<prefix>.components` (k × d) and
    /// `<prefix>.ratios` (1 × k) into a manifest. Values are stored as f32.
    pub fn save(&self, manifest_path: &Path, prefix: &str) -> Result<()> {
        let to32 = |m: &DMatrix<f64>| m.map(|v| v as f32);
        let meta = |kind: &str| {
            let mut m = EntryMeta::default();
            m.extra.insert("kind".into(), kind.into());
            m.extra.insert("rank".into(), self.rank.into());
            m.extra.insert("rank_deficient".into(), self.rank_deficient.into());
            m
        };
        let mean = DMatrix::from_row_slice(1, self.dim(), self.mean.as_slice());
        let ratios = DMatrix::from_row_slice(1, self.n_components(), &self.explained_variance_ratio);
        let variance = DMatrix::from_row_slice(1, self.n_components(), &self.explained_variance);
        save_raw(&to32(&mean), meta("pca_mean"), manifest_path, &format!("{prefix}.mean"))?;
        save_raw(
            &to32(&self.components),
            meta("pca_components"),
            manifest_path,
            &format!("{prefix}.components"),
        )?;
        save_raw(&to32(&ratios), meta("pca_ratios"), manifest_path, &format!("{prefix}.ratios"))?;
        save_raw(
            &to32(&variance),
            meta("pca_variance"),
            manifest_path,
            &format!("{prefix}.variance"),
        )
    }

    pub fn load(manifest_path: &Path, prefix: &str) -> Result<Self> {
        let get = |suffix: &str| -> Result<(DMatrix<f64>, EntryMeta)> {
            let (m, meta) = load_raw(manifest_path, &format!("{prefix}.{suffix}"))?;
            Ok((m.map(f64::from), meta))
        };
        let (mean, meta) = get("mean")?;
        let (components, _) = get("components")?;
        let (ratios, _) = get("ratios")?;
        let (variance, _) = get("variance")?;
        if mean.ncols() != components.ncols() || ratios.ncols() != components.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "inconsistent PCA entries under prefix `{prefix}`"
            )));
        }
        Ok(Self {
            mean: DVector::from_iterator(mean.ncols(), mean.iter().copied()),
            components,
            explained_variance: variance.iter().copied().collect(),
            explained_variance_ratio: ratios.iter().copied().collect(),
            rank: meta.extra.get("rank").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            rank_deficient: meta
                .extra
                .get("rank_deficient")
                .and_then(|v| v.as_bool())
                .unwrap_or(false),
        })
    }
}

/// Eigenpairs sorted by decreasing eigenvalue; ties keep solver order.
fn sorted_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

/// Completes `rows` (orthonormal, possibly fewer than `k`) to `k` orthonormal
/// rows using Gram-Schmidt over the standard basis.
fn complete_orthonormal(rows: &mut Vec<DVector<f64>>, k: usize, d: usize) {
    let mut j = 0;
    while rows.len() < k && j < d {
        let mut v = DVector::zeros(d);
        v[j] = 1.0;
        for _ in 0..2 {
            for r in rows.iter() {
                let proj = r.dot(&v);
                v.axpy(-proj, r, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            rows.push(v / norm);
        }
        j += 1;
    }
}

/// Flips each row so that its largest-magnitude entry is positive.
fn fix_signs(components: &mut DMatrix<f64>) {
    for mut row in components.row_iter_mut() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.neg_mut();
        }
    }
}

pub fn pca_fit(x: &DMatrix<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={} for {n}x{d} data",
            (n - 1).min(d)
        )));
    }
    let mean = column_means(x);
    let xc = center_columns(x, &mean);
    let denom = (n - 1) as f64;
    let total_var: f64 = xc.iter().map(|v| v * v).sum::<f64>() / denom;

    // Eigenvalues of the covariance, and up to k unit directions in feature space.
    let (values, mut rows): (Vec<f64>, Vec<DVector<f64>>) = if d <= n {
        let cov = xc.transpose() * &xc / denom;
        let (vals, vecs) = sorted_eigen(cov);
        let rows = (0..k).map(|i| vecs.column(i).into_owned()).collect();
        (vals, rows)
    } else {
        let gram = &xc * xc.transpose() / denom;
        let (vals, vecs) = sorted_eigen(gram);
        let mut rows = Vec::with_capacity(k);
        for i in 0..k {
            if vals[i] <= 0.0 {
                break;
            }
            let v = xc.transpose() * vecs.column(i);
            let norm = v.norm();
            if norm <= 0.0 {
                break;
            }
            rows.push(v / norm);
        }
        (vals, rows)
    };

    let lambda_max = values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = lambda_max * (n.max(d) as f64) * f64::EPSILON * 16.0;
    let rank = values.iter().filter(|&&v| v > cutoff && v > 0.0).count();

    let kept = rank.min(k);
    rows.truncate(kept);
    complete_orthonormal(&mut rows, k, d);
    if rows.len() < k {
        return Err(Error::Degenerate(format!(
            "could not complete {k} orthonormal components in dimension {d}"
        )));
    }

    let mut components = DMatrix::from_fn(k, d, |i, j| rows[i][j]);
    fix_signs(&mut components);

    let explained_variance: Vec<f64> =
        (0..k).map(|i| if i < rank { values[i].max(0.0) } else { 0.0 }).collect();
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|&v| if total_var > 0.0 { (v / total_var).clamp(0.0, 1.0) } else { 0.0 })
        .collect();

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
        rank,
        rank_deficient: rank < k,
    })
}

/// Projects `(x − mean)` onto the model components.
pub fn pca_transform(model: &PcaModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} columns, PCA model expects {}",
            x.ncols(),
            model.dim()
        )));
    }
    Ok(center_columns(x, &model.mean) * model.components.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    fn sample_variance(col: &[f64]) -> f64 {
        let m = col.iter().sum::<f64>() / col.len() as f64;
        col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64
    }

    #[test]
    fn collinear_points_have_single_component() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 4.0, -1.0, -2.0]);
        let model = pca_fit(&x, 1).unwrap();
        assert!((model.explained_variance_ratio[0] - 1.0).abs() < 1e-6);
        let z = pca_transform(&model, &x).unwrap();
        let total: f64 = (0..2)
            .map(|j| sample_variance(x.column(j).as_slice()))
            .sum();
        assert!((sample_variance(z.column(0).as_slice()) - total).abs() < 1e-6);
    }

    #[test]
    fn axis_aligned_variances() {
        // Column variances 4 and 1 (divisor n − 1), uncorrelated.
        let x = DMatrix::from_row_slice(
            4,
            2,
            &[
                -(6.0f64).sqrt(), 0.0,
                (6.0f64).sqrt(), 0.0,
                0.0, -(1.5f64).sqrt(),
                0.0, (1.5f64).sqrt(),
            ],
        );
        let model = pca_fit(&x, 2).unwrap();
        assert!((model.explained_variance_ratio[0] - 0.8).abs() < 1e-9);
        assert!((model.explained_variance_ratio[1] - 0.2).abs() < 1e-9);
        assert!((model.explained_variance[0] - 4.0).abs() < 1e-9);
        // Sign convention: largest entry positive.
        assert!((model.components[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_row_projects_to_zero() {
        let x = gaussian(30, 6, 1);
        let model = pca_fit(&x, 3).unwrap();
        let m = DMatrix::from_row_slice(1, 6, model.mean.as_slice());
        let z = pca_transform(&model, &m).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_rank_reconstruction() {
        let x = gaussian(25, 6, 2);
        let model = pca_fit(&x, 6).unwrap();
        let back = model.inverse_transform(&pca_transform(&model, &x).unwrap()).unwrap();
        assert!((back - &x).amax() < 1e-5);
    }

    #[test]
    fn ratios_match_svd_of_centered_data() {
        let x = gaussian(100, 20, 3);
        let model = pca_fit(&x, 5).unwrap();
        let mean = column_means(&x);
        let xc = center_columns(&x, &mean);
        let sv = xc.svd(false, false).singular_values;
        let mut s2: Vec<f64> = sv.iter().map(|s| s * s).collect();
        s2.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = s2.iter().sum();
        for i in 0..5 {
            assert!((model.explained_variance_ratio[i] - s2[i] / total).abs() < 1e-6);
        }
    }

    #[test]
    fn wide_data_uses_gram_route_consistently() {
        let x = gaussian(12, 40, 4);
        let wide = pca_fit(&x, 5).unwrap();
        // Same spectrum via the covariance route on the transposed-free problem.
        let mean = column_means(&x);
        let xc = center_columns(&x, &mean);
        let sv = xc.svd(false, false).singular_values;
        let mut s2: Vec<f64> = sv.iter().map(|s| s * s / 11.0).collect();
        s2.sort_by(|a, b| b.total_cmp(a));
        for i in 0..5 {
            assert!((wide.explained_variance[i] - s2[i]).abs() < 1e-8);
        }
        let gram = &wide.components * wide.components.transpose();
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-9);
    }

    #[test]
    fn rank_deficient_is_padded_and_flagged() {
        let base = gaussian(10, 2, 5);
        // 10 × 4 with rank 2.
        let x = DMatrix::from_fn(10, 4, |i, j| base[(i, j % 2)] * (1.0 + j as f64));
        let model = pca_fit(&x, 3).unwrap();
        assert_eq!(model.rank, 2);
        assert!(model.rank_deficient);
        assert_eq!(model.explained_variance_ratio[2], 0.0);
        let gram = &model.components * model.components.transpose();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-9);

        let wide = DMatrix::from_fn(4, 9, |i, j| base[(i, j % 2)] * (1.0 + j as f64));
        let model = pca_fit(&wide, 3).unwrap();
        assert_eq!(model.rank, 2);
        let gram = &model.components * model.components.transpose();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-9);
    }

    #[test]
    fn k_out_of_range() {
        let x = gaussian(5, 3, 6);
        assert!(pca_fit(&x, 0).is_err());
        assert!(pca_fit(&x, 4).is_err());
        assert!(pca_fit(&gaussian(1, 3, 6), 1).is_err());
        let model = pca_fit(&x, 2).unwrap();
        assert!(pca_transform(&model, &gaussian(2, 4, 0)).is_err());
    }

    #[test]
    fn save_and_load_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let model = pca_fit(&gaussian(20, 5, 8), 3).unwrap();
        model.save(dir.path(), "pca").unwrap();
        let back = PcaModel::load(dir.path(), "pca").unwrap();
        assert_eq!(back.rank, model.rank);
        assert!((back.components - &model.components).amax() < 1e-6);
    }
}
