use std::cmp::Ordering;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::{pca_fit, pca_transform};
use crate::tensorio::{load_raw, save_raw, EntryMeta};

/// Representational dissimilarity matrix: symmetric, zero diagonal,
/// nonnegative.
///
/// [`build_rdm`] output additionally has off-diagonal mean 1, but any matrix
/// meeting the structural invariants is accepted so hand-built metric
/// spaces can be compared directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct Rdm {
    c: DMatrix<f64>,
}

impl Rdm {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        let n = c.nrows();
        if n != c.ncols() {
            return Err(Error::DimensionMismatch(format!("RDM must be square, got {:?}", c.shape())));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("RDM is empty".into()));
        }
        for i in 0..n {
            if c[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(format!("RDM diagonal [{i}] = {}", c[(i, i)])));
            }
            for j in 0..i {
                let (a, b) = (c[(i, j)], c[(j, i)]);
                if !(a >= 0.0 && a.is_finite() && b >= 0.0 && b.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "RDM entry ({i}, {j}) is negative or non-finite"
                    )));
                }
                if (a - b).abs() >= 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "RDM is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { c })
    }

    /// Divides a dissimilarity matrix by its off-diagonal mean.
    pub fn normalized(c: DMatrix<f64>) -> Result<Self> {
        let mean = off_diagonal_mean(&c);
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::Degenerate(
                "all points coincide; RDM normalization is undefined".into(),
            ));
        }
        Self::new(c / mean)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.nrows() == 0
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        off_diagonal_mean(&self.c)
    }

    /// `P C Pᵀ` where row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        Ok(Self {
            c: DMatrix::from_fn(self.len(), self.len(), |i, j| self.c[(perm[i], perm[j])]),
        })
    }

    /// Stores the matrix as an f32 manifest entry (single precision on disk).
    pub fn save(&self, manifest_path: &Path, name: &str) -> Result<()> {
        let mut meta = EntryMeta::default();
        meta.extra.insert("kind".into(), "rdm".into());
        save_raw(&self.c.map(|v| v as f32), meta, manifest_path, name)
    }

    pub fn load(manifest_path: &Path, name: &str) -> Result<Self> {
        let (m, _) = load_raw(manifest_path, name)?;
        let mut c = m.map(f64::from);
        // Re-symmetrize against any asymmetry introduced outside this crate.
        let t = c.transpose();
        c = (c + t) * 0.5;
        c.fill_diagonal(0.0);
        Self::new(c)
    }
}

impl TryFrom<DMatrix<f64>> for Rdm {
    type Error = Error;
    fn try_from(c: DMatrix<f64>) -> Result<Self> {
        Self::new(c)
    }
}

impl From<Rdm> for DMatrix<f64> {
    fn from(r: Rdm) -> Self {
        r.c
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!("not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Sum that does not depend on the order of its inputs.
fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

fn off_diagonal_mean(c: &DMatrix<f64>) -> f64 {
    let n = c.nrows();
    if n < 2 {
        return 0.0;
    }
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| c[(i, j)])
        .collect();
    sorted_sum(vals) / (n * (n - 1)) as f64
}

/// `min(50, n − 1, d)`: the component count used when the caller does not
/// choose one.
pub fn default_rdm_pca_dims(n: usize, d: usize) -> usize {
    50.min(n.saturating_sub(1)).min(d)
}

/// Column z-score with population std; constant columns become zeros.
fn zscore_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = sorted_sum(col.iter().copied().collect()) / n;
        let var = sorted_sum(col.iter().map(|v| (v - mean).powi(2)).collect()) / n;
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let std = var.sqrt();
        if std <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            col.fill(0.0);
        } else {
            col.apply(|v| *v = (*v - mean) / std);
        }
    }
    out
}

fn rdm_pipeline(x: &DMatrix<f64>, pca_dims: Option<usize>) -> Result<Rdm> {
    let reduced = match pca_dims {
        Some(k) => pca_transform(&pca_fit(x, k)?, x)?,
        None => x.clone(),
    };
    let z = zscore_columns(&reduced);
    let n = z.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    Rdm::normalized(d)
}

/// PCA (optional) → column z-score → pairwise squared Euclidean distances →
/// division by the off-diagonal mean.
///
/// Rows are processed in a canonical (lexicographic) order and the result is
/// mapped back, so permuting the rows of `x` permutes the output exactly.
pub fn build_rdm(x: &DMatrix<f64>, pca_dims: Option<usize>) -> Result<Rdm> {
    let (n, d) = x.shape();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("RDM needs at least 3 rows, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("RDM input contains NaN/Inf".into()));
    }
    if let Some(k) = pca_dims {
        if k == 0 || k > (n - 1).min(d) {
            return Err(Error::InvalidArgument(format!(
                "pca_dims = {k} must be in 1..={}",
                (n - 1).min(d)
            )));
        }
    }
    let row_cmp = |a: usize, b: usize| -> Ordering {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row_cmp(a, b));
    let canonical = DMatrix::from_fn(n, d, |i, j| x[(order[i], j)]);
    let rdm = rdm_pipeline(&canonical, pca_dims)?;
    let mut pos = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    rdm.permuted(&pos)
}
