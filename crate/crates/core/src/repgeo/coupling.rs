use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly positive weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MassVector(DVector<f64>);

impl MassVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("mass vector is empty".into()));
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("mass[{i}] = {v} is not positive")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("masses sum to {total}, expected 1")));
        }
        Ok(Self(DVector::from_vec(w)))
    }

    /// Normalizes positive weights to unit mass.
    pub fn normalized(w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidArgument(format!("weights sum to {total}")));
        }
        Self::new(w.into_iter().map(|v| v / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform mass over zero points");
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl TryFrom<Vec<f64>> for MassVector {
    type Error = Error;
    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<MassVector> for Vec<f64> {
    fn from(m: MassVector) -> Self {
        m.0.as_slice().to_vec()
    }
}

/// Transport plan between two mass vectors.
///
/// Construction only checks shapes; use [`validate_coupling`] to check
/// nonnegativity and the marginal constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub t: DMatrix<f64>,
    pub p: MassVector,
    pub q: MassVector,
}

impl Coupling {
    pub fn new(t: DMatrix<f64>, p: MassVector, q: MassVector) -> Result<Self> {
        if t.shape() != (p.len(), q.len()) {
            return Err(Error::DimensionMismatch(format!(
                "coupling is {:?}, masses have lengths {} and {}",
                t.shape(),
                p.len(),
                q.len()
            )));
        }
        Ok(Self { t, p, q })
    }

    /// `p qᵀ`, always feasible.
    pub fn independence(p: &MassVector, q: &MassVector) -> Self {
        let t = p.as_vector() * q.as_vector().transpose();
        Self {
            t,
            p: p.clone(),
            q: q.clone(),
        }
    }

    pub fn transposed(&self) -> Self {
        Self {
            t: self.t.transpose(),
            p: self.q.clone(),
            q: self.p.clone(),
        }
    }

    /// Largest absolute deviation of the row and column sums from `p` and `q`.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self.t.column_sum() - self.p.as_vector();
        let cols = self.t.row_sum().transpose() - self.q.as_vector();
        rows.amax().max(cols.amax())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Negative { row: usize, col: usize, value: f64 },
    RowSum { row: usize, expected: f64, actual: f64 },
    ColSum { col: usize, expected: f64, actual: f64 },
}

/// Lists every entry below `−tol` and every marginal off by more than `tol`.
pub fn validate_coupling(c: &Coupling, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..c.t.nrows() {
        for j in 0..c.t.ncols() {
            let v = c.t[(i, j)];
            if !(v >= -tol) {
                out.push(Violation::Negative { row: i, col: j, value: v });
            }
        }
    }
    for (i, row) in c.t.row_iter().enumerate() {
        let (expected, actual) = (c.p.as_slice()[i], row.sum());
        if !((actual - expected).abs() <= tol) {
            out.push(Violation::RowSum { row: i, expected, actual });
        }
    }
    for (j, col) in c.t.column_iter().enumerate() {
        let (expected, actual) = (c.q.as_slice()[j], col.sum());
        if !((actual - expected).abs() <= tol) {
            out.push(Violation::ColSum { col: j, expected, actual });
        }
    }
    out
}
