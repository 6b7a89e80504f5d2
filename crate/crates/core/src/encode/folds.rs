use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of items to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub n_items: usize,
    pub k: usize,
    /// `None` for assignments supplied by the caller.
    pub seed: Option<u64>,
    pub assignments: Vec<usize>,
}

/// Shuffled, balanced partition of `0..n_items` into `k` folds.
///
/// Items are permuted with a ChaCha8 stream seeded by `seed`; the item at
/// shuffled position `i` goes to fold `i mod k`.
pub fn make_folds(n_items: usize, k: usize, seed: u64) -> Result<FoldSpec> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if n_items < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n_items} items into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n_items];
    for (pos, &item) in order.iter().enumerate() {
        assignments[item] = pos % k;
    }
    Ok(FoldSpec {
        n_items,
        k,
        seed: Some(seed),
        assignments,
    })
}

impl FoldSpec {
    /// Wraps explicit assignments, checking that every fold is used and that
    /// fold sizes differ by at most one.
    pub fn from_assignments(assignments: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            if a >= k {
                return Err(Error::InvalidArgument(format!("fold index {a} >= {k}")));
            }
            sizes[a] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if *lo == 0 || hi - lo > 1 {
            return Err(Error::InvalidArgument(format!("unbalanced fold sizes {sizes:?}")));
        }
        Ok(Self {
            n_items: assignments.len(),
            k,
            seed: None,
            assignments,
        })
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}
