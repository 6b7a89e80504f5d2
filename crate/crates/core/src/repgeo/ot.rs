//! Discrete optimal transport between two histograms.
//!
//! [`emd`] solves the linear program exactly with the transportation simplex
//! (spanning-tree basis, block pricing). [`sinkhorn_log`] solves the
//! entropically regularized problem in the log domain, and
//! [`round_to_feasible`] snaps an approximate plan onto the transport
//! polytope.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// A basic feasible solution: `n + m − 1` cells forming a spanning tree of
/// the bipartite row/column graph, with their flows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportBasis {
    n: usize,
    m: usize,
    cells: Vec<(usize, usize)>,
    flows: Vec<f64>,
}

impl TransportBasis {
    /// North-west corner rule. Degenerate steps keep a zero-flow basic cell
    /// so the basis always has `n + m − 1` cells.
    fn northwest(a: &[f64], b: &[f64]) -> Self {
        let (n, m) = (a.len(), b.len());
        let (mut supply, mut demand) = (a.to_vec(), b.to_vec());
        let mut cells = Vec::with_capacity(n + m - 1);
        let mut flows = Vec::with_capacity(n + m - 1);
        let (mut i, mut j) = (0, 0);
        while i < n && j < m {
            let f = supply[i].min(demand[j]).max(0.0);
            cells.push((i, j));
            flows.push(f);
            supply[i] -= f;
            demand[j] -= f;
            if i == n - 1 {
                j += 1;
            } else if j == m - 1 || supply[i] <= demand[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { n, m, cells, flows }
    }

    fn plan(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.n, self.m);
        for (&(i, j), &f) in self.cells.iter().zip(&self.flows) {
            t[(i, j)] = f;
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct EmdSolution {
    pub plan: DMatrix<f64>,
    pub cost: f64,
    pub iterations: usize,
    /// False when the pivot budget ran out before reaching optimality.
    pub optimal: bool,
    pub basis: TransportBasis,
}

struct Tree {
    u: Vec<f64>,
    v: Vec<f64>,
    parent: Vec<(usize, usize)>,
    depth: Vec<usize>,
}

fn build_tree(basis: &TransportBasis, cost: &DMatrix<f64>) -> Result<Tree> {
    let (n, m) = (basis.n, basis.m);
    let nodes = n + m;
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
    for (k, &(i, j)) in basis.cells.iter().enumerate() {
        adj[i].push((n + j, k));
        adj[n + j].push((i, k));
    }
    let mut pot = vec![0.0; nodes];
    let mut parent = vec![(NONE, NONE); nodes];
    let mut depth = vec![NONE; nodes];
    depth[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    let mut seen = 1;
    while let Some(node) = queue.pop_front() {
        for &(next, k) in &adj[node] {
            if depth[next] != NONE {
                continue;
            }
            let (i, j) = basis.cells[k];
            // u_i + v_j = c_ij along every basic cell.
            pot[next] = cost[(i, j)] - pot[node];
            parent[next] = (node, k);
            depth[next] = depth[node] + 1;
            seen += 1;
            queue.push_back(next);
        }
    }
    if seen != nodes {
        return Err(Error::Degenerate("transport basis is not a spanning tree".into()));
    }
    Ok(Tree {
        u: pot[..n].to_vec(),
        v: pot[n..].to_vec(),
        parent,
        depth,
    })
}

fn check_marginals(a: &[f64], b: &[f64], cost: &DMatrix<f64>) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("transport between empty histograms".into()));
    }
    if cost.shape() != (a.len(), b.len()) {
        return Err(Error::DimensionMismatch(format!(
            "cost is {:?}, histograms have lengths {} and {}",
            cost.shape(),
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("histogram entries must be finite and >= 0".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "unbalanced histograms: {sa} vs {sb}"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix contains NaN/Inf".into()));
    }
    Ok(())
}

/// Exact optimal transport `min ⟨C, T⟩` over `T ≥ 0, T1 = a, Tᵀ1 = b`.
pub fn emd(a: &[f64], b: &[f64], cost: &DMatrix<f64>, max_iter: usize) -> Result<EmdSolution> {
    emd_warm(a, b, cost, None, max_iter)
}

/// Like [`emd`], starting from a previous basis for the same histograms.
pub fn emd_warm(
    a: &[f64],
    b: &[f64],
    cost: &DMatrix<f64>,
    warm: Option<&TransportBasis>,
    max_iter: usize,
) -> Result<EmdSolution> {
    check_marginals(a, b, cost)?;
    let (n, m) = (a.len(), b.len());
    let mut basis = match warm {
        Some(w) if w.n == n && w.m == m => w.clone(),
        _ => TransportBasis::northwest(a, b),
    };
    let mut index = vec![NONE; n * m];
    for (k, &(i, j)) in basis.cells.iter().enumerate() {
        index[i * m + j] = k;
    }

    let scale = cost.amax().max(1.0);
    let tol = 1e-12 * scale;
    let block = ((n * m) as f64).sqrt().ceil().max(16.0) as usize;
    let total = n * m;
    let mut cursor = 0usize;
    let mut iterations = 0;
    let mut optimal = false;

    while iterations < max_iter {
        let tree = build_tree(&basis, cost)?;

        // Block pricing: best candidate within the first block holding one.
        let mut best = (0.0, NONE);
        let mut scanned = 0;
        while scanned < total {
            let end = (scanned + block).min(total);
            for _ in scanned..end {
                let cell = cursor;
                cursor = if cursor + 1 == total { 0 } else { cursor + 1 };
                if index[cell] != NONE {
                    continue;
                }
                let (i, j) = (cell / m, cell % m);
                let rc = cost[(i, j)] - tree.u[i] - tree.v[j];
                if rc < best.0 {
                    best = (rc, cell);
                }
            }
            scanned = end;
            if best.0 < -tol {
                break;
            }
        }
        if best.1 == NONE || best.0 >= -tol {
            optimal = true;
            break;
        }

        let (ei, ej) = (best.1 / m, best.1 % m);
        // Tree path from column node back to row node closes the cycle.
        let (mut x, mut y) = (ei, n + ej);
        let (mut from_row, mut from_col) = (Vec::new(), Vec::new());
        while x != y {
            if tree.depth[x] >= tree.depth[y] {
                from_row.push(tree.parent[x].1);
                x = tree.parent[x].0;
            } else {
                from_col.push(tree.parent[y].1);
                y = tree.parent[y].0;
            }
        }
        let cycle: Vec<usize> = from_col.into_iter().chain(from_row.into_iter().rev()).collect();

        let mut theta = f64::INFINITY;
        let mut leave = NONE;
        for (pos, &k) in cycle.iter().enumerate() {
            if pos % 2 == 0 && basis.flows[k] < theta {
                theta = basis.flows[k];
                leave = k;
            }
        }
        debug_assert!(leave != NONE);
        for (pos, &k) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                basis.flows[k] = (basis.flows[k] - theta).max(0.0);
            } else {
                basis.flows[k] += theta;
            }
        }
        let (li, lj) = basis.cells[leave];
        index[li * m + lj] = NONE;
        basis.cells[leave] = (ei, ej);
        basis.flows[leave] = theta;
        index[best.1] = leave;
        iterations += 1;
    }

    let plan = basis.plan();
    let cost_value = plan.component_mul(cost).sum();
    Ok(EmdSolution {
        plan,
        cost: cost_value,
        iterations,
        optimal,
        basis,
    })
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: DMatrix<f64>,
    pub iterations: usize,
    /// Max deviation of row sums from `a` (columns are exact after each sweep).
    pub marginal_error: f64,
    pub converged: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT `min ⟨C, T⟩ − ε H(T)` by log-domain Sinkhorn iterations.
pub fn sinkhorn_log(
    a: &[f64],
    b: &[f64],
    cost: &DMatrix<f64>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornSolution> {
    check_marginals(a, b, cost)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (n, m) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut marginal_error = f64::INFINITY;
    let mut iterations = 0;

    while iterations < max_iter {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - cost[(i, j)]) / epsilon));
            f[i] = epsilon * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[(i, j)]) / epsilon));
            g[j] = epsilon * (log_b[j] - lse);
        }
        iterations += 1;
        marginal_error = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp())
                    .sum();
                (row - a[i]).abs()
            })
            .fold(0.0, f64::max);
        if marginal_error <= tol {
            break;
        }
    }
    let plan = DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp());
    Ok(SinkhornSolution {
        plan,
        iterations,
        marginal_error,
        converged: marginal_error <= tol,
    })
}

/// Projects a nonnegative plan onto `Π(a, b)`: rows and columns are scaled
/// down to at most their target mass, then the deficit is filled with a
/// rank-one correction.
pub fn round_to_feasible(plan: &DMatrix<f64>, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    let mut t = plan.map(|v| v.max(0.0));
    for (i, mut row) in t.row_iter_mut().enumerate() {
        let s = row.sum();
        if s > a[i] {
            row *= a[i] / s;
        }
    }
    for (j, mut col) in t.column_iter_mut().enumerate() {
        let s = col.sum();
        if s > b[j] {
            col *= b[j] / s;
        }
    }
    let err_r: Vec<f64> = t.row_iter().enumerate().map(|(i, r)| (a[i] - r.sum()).max(0.0)).collect();
    let err_c: Vec<f64> = t.column_iter().enumerate().map(|(j, c)| (b[j] - c.sum()).max(0.0)).collect();
    let mass: f64 = err_r.iter().sum();
    if mass > 0.0 {
        for i in 0..t.nrows() {
            for j in 0..t.ncols() {
                t[(i, j)] += err_r[i] * err_c[j] / mass;
            }
        }
    }
    t
}
