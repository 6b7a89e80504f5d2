use super::rdm::Rdm;
use crate::error::{Error, Result};

const MAX_ORACLE_POINTS: usize = 8;

/// Minimum GW objective over permutation couplings `T = P / n`, by
/// exhaustive enumeration (Heap's algorithm).
///
/// The permutation couplings are a subset of `Π(u, u)`, so the value is an
/// upper bound on the uniform-mass GW discrepancy.
pub fn gw_permutation_oracle(c1: &Rdm, c2: &Rdm) -> Result<f64> {
    let n = c1.len();
    if c2.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "permutation oracle needs equal sizes, got {n} and {}",
            c2.len()
        )));
    }
    if n > MAX_ORACLE_POINTS {
        return Err(Error::InvalidArgument(format!(
            "permutation oracle is limited to n <= {MAX_ORACLE_POINTS}, got {n}"
        )));
    }
    let (a, b) = (c1.matrix(), c2.matrix());
    let value = |perm: &[usize]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..n {
                s += (a[(i, k)] - b[(perm[i], perm[k])]).powi(2);
            }
        }
        s / (n * n) as f64
    };

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = value(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            let j = if i % 2 == 0 { 0 } else { counters[i] };
            perm.swap(j, i);
            best = best.min(value(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}
