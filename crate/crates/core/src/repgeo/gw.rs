use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coupling::{Coupling, MassVector};
use super::ot::{emd, emd_warm, round_to_feasible, sinkhorn_log, TransportBasis};
use super::rdm::Rdm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwSolverConfig {
    /// Entropic strength; 0 selects the exact conditional-gradient solver.
    pub epsilon: f64,
    pub max_outer_iters: usize,
    /// Sinkhorn iteration cap; the exact OT subproblem gets
    /// `inner_iters · (n + m)` simplex pivots.
    pub inner_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Extra seeded random initializations on top of the two deterministic ones.
    pub restarts: usize,
}

impl Default for GwSolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            max_outer_iters: 200,
            inner_iters: 1000,
            tol: 1e-9,
            seed: 0,
            restarts: 16,
        }
    }
}

impl GwSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon = {} must be >= 0", self.epsilon)));
        }
        if self.max_outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidArgument("iteration limits must be >= 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidArgument(format!("tol = {} must be > 0", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GwResult {
    /// Unregularized GW objective of `coupling`.
    pub loss: f64,
    pub coupling: Coupling,
    pub iterations: usize,
    pub converged: bool,
    pub epsilon: f64,
    /// Which initialization won: 0 product, 1 distance-profile matching,
    /// 2.. seeded random restarts.
    pub init: usize,
    /// Final loss of every initialization, in order.
    pub init_losses: Vec<f64>,
    pub config: GwSolverConfig,
}

struct Problem<'a> {
    c1: &'a DMatrix<f64>,
    c2: &'a DMatrix<f64>,
    c1_sq: DMatrix<f64>,
    c2_sq: DMatrix<f64>,
    p: &'a [f64],
    q: &'a [f64],
    /// `(C1² p) 1ᵀ + 1 (C2² q)ᵀ`
    const_c: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn new(c1: &'a DMatrix<f64>, c2: &'a DMatrix<f64>, p: &'a [f64], q: &'a [f64]) -> Self {
        let c1_sq = c1.map(|v| v * v);
        let c2_sq = c2.map(|v| v * v);
        let a = &c1_sq * nalgebra::DVector::from_column_slice(p);
        let b = &c2_sq * nalgebra::DVector::from_column_slice(q);
        let const_c = DMatrix::from_fn(p.len(), q.len(), |i, j| a[i] + b[j]);
        Self { c1, c2, c1_sq, c2_sq, p, q, const_c }
    }

    /// `rᵀ C1² r + cᵀ C2² c − 2 ⟨C1 T C2, T⟩` with `r, c` the marginals of `T`.
    fn objective(&self, t: &DMatrix<f64>) -> f64 {
        let r = t.column_sum();
        let c = t.row_sum().transpose();
        let own = r.dot(&(&self.c1_sq * &r)) + c.dot(&(&self.c2_sq * &c));
        let cross = (self.c1 * t * self.c2).dot(t);
        (own - 2.0 * cross).max(0.0)
    }

    fn pivot_cap(&self, cfg: &GwSolverConfig) -> usize {
        cfg.inner_iters.saturating_mul(self.p.len() + self.q.len())
    }
}

struct Run {
    t: DMatrix<f64>,
    loss: f64,
    iterations: usize,
    converged: bool,
}

/// Conditional gradient with exact line search; the linear subproblem is an
/// exact OT solve warm-started from the previous basis.
fn frank_wolfe(prob: &Problem, mut t: DMatrix<f64>, cfg: &GwSolverConfig) -> Result<Run> {
    let mut f = prob.objective(&t);
    let mut basis: Option<TransportBasis> = None;
    let cap = prob.pivot_cap(cfg);
    for it in 1..=cfg.max_outer_iters {
        let ctc = prob.c1 * &t * prob.c2;
        let g = &prob.const_c - &ctc * 2.0;
        let sol = emd_warm(prob.p, prob.q, &g, basis.as_ref(), cap)?;
        basis = Some(sol.basis);
        let d = &sol.plan - &t;
        // Gradient is 2G, so the gap is 2⟨G, T − S⟩.
        let gap = -2.0 * g.dot(&d);
        if gap <= cfg.tol * f.max(1.0) {
            return Ok(Run { t, loss: f, iterations: it, converged: true });
        }
        let b = prob.const_c.dot(&d) - 4.0 * ctc.dot(&d);
        let a = -2.0 * (prob.c1 * &d * prob.c2).dot(&d);
        let gamma = if a > 0.0 {
            (-b / (2.0 * a)).clamp(0.0, 1.0)
        } else if a + b < 0.0 {
            1.0
        } else {
            0.0
        };
        if gamma == 0.0 {
            return Ok(Run { t, loss: f, iterations: it, converged: true });
        }
        t += &d * gamma;
        let f_new = prob.objective(&t);
        let delta = (f - f_new).abs();
        f = f_new;
        if delta <= cfg.tol * (1.0 + f.abs()) {
            return Ok(Run { t, loss: f, iterations: it, converged: true });
        }
    }
    Ok(Run { t, loss: f, iterations: cfg.max_outer_iters, converged: false })
}

/// A feasible direction: unit mass added at `plus` cells, removed at `minus`
/// cells, with matching rows and columns so both marginals are preserved.
struct Exchange {
    plus: Vec<(usize, usize)>,
    minus: Vec<(usize, usize)>,
}

impl Exchange {
    fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.plus
            .iter()
            .map(|&(r, c)| (r, c, 1.0))
            .chain(self.minus.iter().map(|&(r, c)| (r, c, -1.0)))
    }

    /// Best step along the exchange and the resulting objective change.
    fn evaluate(&self, prob: &Problem, t: &DMatrix<f64>, ctc: &DMatrix<f64>) -> (f64, f64) {
        let b = -4.0 * self.cells().map(|(r, c, s)| s * ctc[(r, c)]).sum::<f64>();
        let mut quad = 0.0;
        for (r, c, s) in self.cells() {
            for (r2, c2, s2) in self.cells() {
                quad += s * s2 * prob.c1[(r, r2)] * prob.c2[(c, c2)];
            }
        }
        let a = -2.0 * quad;
        let dmax = self.minus.iter().map(|&cell| t[cell]).fold(f64::INFINITY, f64::min);
        let delta = if a > 0.0 { (-b / (2.0 * a)).clamp(0.0, dmax) } else { dmax };
        (delta * b + delta * delta * a, delta)
    }
}

/// Supports up to this size also try three-cell cyclic exchanges.
const CYCLE_SUPPORT_LIMIT: usize = 40;

fn candidate_exchanges(support: &[(usize, usize)]) -> Vec<Exchange> {
    let mut out = Vec::new();
    for (x, &(i, j)) in support.iter().enumerate() {
        for &(k, l) in &support[x + 1..] {
            if i != k && j != l {
                out.push(Exchange { plus: vec![(i, l), (k, j)], minus: vec![(i, j), (k, l)] });
            }
        }
    }
    if support.len() <= CYCLE_SUPPORT_LIMIT {
        for (x, &(i1, j1)) in support.iter().enumerate() {
            for (y, &(i2, j2)) in support.iter().enumerate().skip(x + 1) {
                for &(i3, j3) in &support[y + 1..] {
                    let rows_distinct = i1 != i2 && i2 != i3 && i1 != i3;
                    let cols_distinct = j1 != j2 && j2 != j3 && j1 != j3;
                    if !(rows_distinct && cols_distinct) {
                        continue;
                    }
                    let minus = vec![(i1, j1), (i2, j2), (i3, j3)];
                    out.push(Exchange { plus: vec![(i1, j2), (i2, j3), (i3, j1)], minus: minus.clone() });
                    out.push(Exchange { plus: vec![(i1, j3), (i2, j1), (i3, j2)], minus });
                }
            }
        }
    }
    out
}

/// Greedy mass exchanges between support cells. On permutation couplings
/// these are the pairwise swaps and three-cycles, moves where conditional
/// gradient alone often stalls. Returns `None` when no exchange lowers the
/// objective.
fn exchange_polish(prob: &Problem, t: &DMatrix<f64>, tol: f64, max_moves: usize) -> Option<DMatrix<f64>> {
    let (n, m) = t.shape();
    let support_cap = 4 * (n + m);
    let mut t = t.clone();
    let mut ctc = prob.c1 * &t * prob.c2;
    let mut f = prob.objective(&t);
    let mut moved = false;
    for _ in 0..max_moves {
        let support: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| t[(i, j)] > 0.0)
            .collect();
        if support.len() > support_cap {
            break;
        }
        let mut best: Option<(f64, f64, Exchange)> = None;
        for ex in candidate_exchanges(&support) {
            let (change, delta) = ex.evaluate(prob, &t, &ctc);
            if change < best.as_ref().map_or(0.0, |b| b.0) {
                best = Some((change, delta, ex));
            }
        }
        let Some((change, delta, ex)) = best else { break };
        if -change <= tol * f.max(1.0) {
            break;
        }
        let dmax = ex.minus.iter().map(|&cell| t[cell]).fold(f64::INFINITY, f64::min);
        for (r, c, s) in ex.cells() {
            t[(r, c)] += s * delta;
            // C1 T C2 changes by the outer product of column r of C1 and row c of C2.
            for u in 0..n {
                let w = s * delta * prob.c1[(u, r)];
                if w != 0.0 {
                    for v in 0..m {
                        ctc[(u, v)] += w * prob.c2[(c, v)];
                    }
                }
            }
        }
        if delta == dmax {
            // A full exchange empties the smallest cell exactly.
            let emptied = ex.minus.iter().copied().min_by(|a, b| t[*a].total_cmp(&t[*b])).expect("nonempty");
            t[emptied] = 0.0;
        }
        t.apply(|v| *v = v.max(0.0));
        f = prob.objective(&t);
        moved = true;
    }
    moved.then_some(t)
}

/// Conditional gradient alternated with exchange polishing until neither
/// makes progress.
fn exact_solver(prob: &Problem, init: DMatrix<f64>, cfg: &GwSolverConfig) -> Result<Run> {
    let mut run = frank_wolfe(prob, init, cfg)?;
    let mut iterations = run.iterations;
    while iterations < cfg.max_outer_iters {
        let Some(t) = exchange_polish(prob, &run.t, cfg.tol, cfg.max_outer_iters) else { break };
        let next = frank_wolfe(prob, t, cfg)?;
        iterations += next.iterations;
        if next.loss >= run.loss {
            break;
        }
        run = next;
    }
    run.iterations = iterations;
    Ok(run)
}

fn neg_entropy(t: &DMatrix<f64>) -> f64 {
    t.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// Proximal mirror descent on `f(T) + ε Σ T log T`: each step solves
///
/// ```text
/// min_{T ∈ Π(p, q)} ⟨∇f(T_k), T⟩ + ε Σ T log T + λ KL(T ‖ T_k)
/// ```
///
/// by Sinkhorn and rounds the result onto the polytope. `λ` starts at `ε`
/// and doubles whenever a step would raise the regularized objective.
fn mirror_descent(prob: &Problem, mut t: DMatrix<f64>, epsilon: f64, cfg: &GwSolverConfig) -> Result<Run> {
    let regularized = |t: &DMatrix<f64>, f: f64| f + epsilon * neg_entropy(t);
    let mut f = prob.objective(&t);
    let mut big_f = regularized(&t, f);
    let mut lambda = epsilon;
    for it in 1..=cfg.max_outer_iters {
        let g = (&prob.const_c - (prob.c1 * &t * prob.c2) * 2.0) * 2.0;
        let cost = DMatrix::from_fn(t.nrows(), t.ncols(), |i, j| g[(i, j)] - lambda * t[(i, j)].max(1e-300).ln());
        let sol = sinkhorn_log(prob.p, prob.q, &cost, epsilon + lambda, cfg.inner_iters, 1e-12)?;
        let t_new = round_to_feasible(&sol.plan, prob.p, prob.q);
        let f_new = prob.objective(&t_new);
        let big_f_new = regularized(&t_new, f_new);
        if big_f_new > big_f + 1e-12 * (1.0 + big_f.abs()) && lambda < 1e6 * epsilon {
            lambda *= 2.0;
            continue;
        }
        let change = (big_f - big_f_new).abs();
        t = t_new;
        f = f_new;
        big_f = big_f_new;
        lambda = (lambda / 2.0).max(epsilon);
        if change <= cfg.tol * (1.0 + big_f.abs()) {
            return Ok(Run { t, loss: f, iterations: it, converged: true });
        }
    }
    Ok(Run { t, loss: f, iterations: cfg.max_outer_iters, converged: false })
}

/// Entropic solver with continuation: strengths halve from the scale of the
/// initial gradient down to `cfg.epsilon`, each stage warm-started from the
/// previous one. Different targets share the same path until they diverge,
/// which keeps results consistent across a ladder of strengths.
fn entropic(prob: &Problem, init: DMatrix<f64>, cfg: &GwSolverConfig) -> Result<Run> {
    let g0 = (&prob.const_c - (prob.c1 * &init * prob.c2) * 2.0) * 2.0;
    let mut schedule = Vec::new();
    let mut level = g0.amax();
    while level > cfg.epsilon && schedule.len() < 64 {
        schedule.push(level);
        level /= 2.0;
    }
    schedule.push(cfg.epsilon);
    let mut t = init;
    let mut iterations = 0;
    let mut last = None;
    for eps in schedule {
        let run = mirror_descent(prob, t, eps, cfg)?;
        iterations += run.iterations;
        t = run.t.clone();
        last = Some(run);
    }
    let mut run = last.expect("schedule is never empty");
    run.iterations = iterations;
    Ok(run)
}

/// Squared 2-Wasserstein distance between two weighted samples on the line,
/// both given sorted by value.
fn w2_line(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut s = 0.0;
    loop {
        let d2 = (a[i].0 - b[j].0).powi(2);
        if ra <= rb {
            s += ra * d2;
            rb -= ra;
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        } else {
            s += rb * d2;
            ra -= rb;
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    s
}

/// Couples points whose distance profiles (distribution of distances to all
/// other points) agree. Exact for isometric spaces with distinct profiles.
fn profile_matching_init(prob: &Problem, cap: usize) -> Result<DMatrix<f64>> {
    let profiles = |c: &DMatrix<f64>, w: &[f64]| -> Vec<Vec<(f64, f64)>> {
        (0..c.nrows())
            .map(|i| {
                let mut row: Vec<(f64, f64)> = (0..c.ncols()).map(|k| (c[(i, k)], w[k])).collect();
                row.sort_by(|x, y| x.0.total_cmp(&y.0));
                row
            })
            .collect()
    };
    let pa = profiles(prob.c1, prob.p);
    let pb = profiles(prob.c2, prob.q);
    let cost = DMatrix::from_fn(pa.len(), pb.len(), |i, j| w2_line(&pa[i], &pb[j]));
    Ok(emd(prob.p, prob.q, &cost, cap)?.plan)
}

fn random_init(prob: &Problem, cfg: &GwSolverConfig, index: usize) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let cost = DMatrix::from_fn(prob.p.len(), prob.q.len(), |_, _| rng.random_range(0.0..1.0));
    if index % 2 == 0 {
        Ok(emd(prob.p, prob.q, &cost, prob.pivot_cap(cfg))?.plan)
    } else {
        let sol = sinkhorn_log(prob.p, prob.q, &cost, 0.1, 1000, 1e-12)?;
        Ok(round_to_feasible(&sol.plan, prob.p, prob.q))
    }
}

fn solve_oriented(c1: &Rdm, c2: &Rdm, p: &MassVector, q: &MassVector, cfg: &GwSolverConfig) -> Result<(Run, usize, Vec<f64>)> {
    let prob = Problem::new(c1.matrix(), c2.matrix(), p.as_slice(), q.as_slice());
    let count = 2 + cfg.restarts;
    let runs = (0..count)
        .into_par_iter()
        .map(|k| {
            let init = match k {
                0 => p.as_vector() * q.as_vector().transpose(),
                1 => profile_matching_init(&prob, prob.pivot_cap(cfg))?,
                _ => random_init(&prob, cfg, k)?,
            };
            if cfg.epsilon > 0.0 {
                entropic(&prob, init, cfg)
            } else {
                exact_solver(&prob, init, cfg)
            }
        })
        .collect::<Result<Vec<Run>>>()?;
    let losses: Vec<f64> = runs.iter().map(|r| r.loss).collect();
    let mut best = 0;
    for (k, l) in losses.iter().enumerate() {
        if *l < losses[best] {
            best = k;
        }
    }
    let run = runs.into_iter().nth(best).expect("at least two runs");
    Ok((run, best, losses))
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Gromov-Wasserstein discrepancy between two dissimilarity matrices.
///
/// The problem is always solved with its arguments in a canonical order
/// (smaller side first, ties broken by comparing entries) and the coupling
/// transposed back, so swapping `(c1, p)` with `(c2, q)` gives the same loss.
pub fn gw_distance(c1: &Rdm, c2: &Rdm, p: &MassVector, q: &MassVector, cfg: &GwSolverConfig) -> Result<GwResult> {
    cfg.validate()?;
    if c1.len() != p.len() || c2.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "RDMs of size {} and {} with masses of length {} and {}",
            c1.len(),
            c2.len(),
            p.len(),
            q.len()
        )));
    }
    let swap = match c1.len().cmp(&c2.len()) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => lex_cmp(c1.matrix().as_slice(), c2.matrix().as_slice())
            .then_with(|| lex_cmp(p.as_slice(), q.as_slice()))
            .is_gt(),
    };
    let (run, init, init_losses) = if swap {
        let (mut run, k, l) = solve_oriented(c2, c1, q, p, cfg)?;
        run.t = run.t.transpose();
        (run, k, l)
    } else {
        solve_oriented(c1, c2, p, q, cfg)?
    };
    let coupling = Coupling::new(run.t, p.clone(), q.clone())?;
    let violation = coupling.marginal_violation();
    let converged = run.converged && violation < 1e-6 && coupling.t.iter().all(|&v| v >= 0.0);
    if run.converged && !converged {
        log::warn!("gw_distance: coupling marginal violation {violation:e} after convergence");
    }
    Ok(GwResult {
        loss: run.loss,
        coupling,
        iterations: run.iterations,
        converged,
        epsilon: cfg.epsilon,
        init,
        init_losses,
        config: *cfg,
    })
}

/// GW objective `Σ |C1[i,k] − C2[j,l]|² T[i,j] T[k,l]` of an arbitrary plan.
pub fn gw_objective(c1: &Rdm, c2: &Rdm, t: &DMatrix<f64>) -> Result<f64> {
    if t.shape() != (c1.len(), c2.len()) {
        return Err(Error::DimensionMismatch(format!(
            "plan is {:?}, RDMs have sizes {} and {}",
            t.shape(),
            c1.len(),
            c2.len()
        )));
    }
    let r: Vec<f64> = t.column_sum().iter().copied().collect();
    let c: Vec<f64> = t.row_sum().iter().copied().collect();
    Ok(Problem::new(c1.matrix(), c2.matrix(), &r, &c).objective(t))
}
