//! Minibatch optimal transport between equal-size point clouds with uniform
//! weights: squared-Euclidean and condition-augmented costs, an exact
//! assignment solver, a log-domain Sinkhorn solver and coupling sampling.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

/// Square matrix of non-negative, finite transport costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(costs: Array2<f64>) -> Result<Self> {
        if costs.nrows() != costs.ncols() {
            return Err(Error::shape(format!(
                "cost matrix must be square, got {:?}",
                costs.dim()
            )));
        }
        if let Some(v) = costs.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost matrix entry {v}")));
        }
        if costs.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("cost matrix entries must be non-negative"));
        }
        Ok(CostMatrix(costs))
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix(self.0.t().to_owned())
    }
}

/// A batch of `(s, a, s')` triples stored as row-aligned matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        let n = self.states.nrows();
        if self.actions.nrows() != n || self.next_states.nrows() != n {
            return Err(Error::shape("triple batch columns have different lengths"));
        }
        Ok(())
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pairwise_sq(x: ArrayView2<f64>, y: ArrayView2<f64>, out: &mut Array2<f64>, weight: f64) {
    for (i, xi) in x.outer_iter().enumerate() {
        for (j, yj) in y.outer_iter().enumerate() {
            out[[i, j]] += weight * sq_dist(xi, yj);
        }
    }
}

/// `C[i][j] = ‖x0_i − x1_j‖²`.
pub fn cost_matrix(x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Result<CostMatrix> {
    if x0.nrows() != x1.nrows() {
        return Err(Error::shape(format!(
            "point sets must have equal size, got {} and {}",
            x0.nrows(),
            x1.nrows()
        )));
    }
    if x0.ncols() != x1.ncols() {
        return Err(Error::shape(format!(
            "point dimensions differ: {} vs {}",
            x0.ncols(),
            x1.ncols()
        )));
    }
    let mut c = Array2::zeros((x0.nrows(), x1.nrows()));
    pairwise_sq(x0, x1, &mut c, 1.0);
    CostMatrix::new(c)
}

/// `C[i][j] = ‖s'_off,i − s'_on,j‖² + η (‖s_off,i − s_on,j‖² + ‖a_off,i − a_on,j‖²)`.
pub fn augmented_cost_matrix(offline: &TripleBatch, online: &TripleBatch, eta: f64) -> Result<CostMatrix> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::invalid(format!("eta must be a finite value >= 0, got {eta}")));
    }
    offline.check()?;
    online.check()?;
    if offline.len() != online.len() {
        return Err(Error::shape("triple batches must have equal size"));
    }
    if offline.states.ncols() != online.states.ncols()
        || offline.actions.ncols() != online.actions.ncols()
        || offline.next_states.ncols() != online.next_states.ncols()
    {
        return Err(Error::shape("triple batches have different state or action dimensions"));
    }
    let k = offline.len();
    let mut c = Array2::zeros((k, k));
    pairwise_sq(offline.next_states.view(), online.next_states.view(), &mut c, 1.0);
    if eta > 0.0 {
        pairwise_sq(offline.states.view(), online.states.view(), &mut c, eta);
        pairwise_sq(offline.actions.view(), online.actions.view(), &mut c, eta);
    }
    CostMatrix::new(c)
}

#[derive(Debug, Clone, PartialEq)]
enum Plan {
    /// Row `i` sends all its mass to column `perm[i]`.
    Permutation(Vec<usize>),
    Dense(Array2<f64>),
}

/// A k×k transport plan with (approximately) uniform marginals 1/k.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    k: usize,
    plan: Plan,
}

impl Coupling {
    pub fn from_permutation(perm: Vec<usize>) -> Result<Self> {
        let k = perm.len();
        let mut seen = vec![false; k];
        for &j in &perm {
            if j >= k || seen[j] {
                return Err(Error::invalid("not a permutation"));
            }
            seen[j] = true;
        }
        Ok(Coupling {
            k,
            plan: Plan::Permutation(perm),
        })
    }

    pub fn from_dense(plan: Array2<f64>) -> Result<Self> {
        if plan.nrows() != plan.ncols() {
            return Err(Error::shape("coupling must be square"));
        }
        if plan.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("coupling entries must be finite and non-negative"));
        }
        Ok(Coupling {
            k: plan.nrows(),
            plan: Plan::Dense(plan),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn permutation(&self) -> Option<&[usize]> {
        match &self.plan {
            Plan::Permutation(p) => Some(p),
            Plan::Dense(_) => None,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.plan {
            Plan::Permutation(p) => {
                if p[i] == j {
                    1.0 / self.k as f64
                } else {
                    0.0
                }
            }
            Plan::Dense(a) => a[[i, j]],
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match &self.plan {
            Plan::Permutation(p) => {
                let mut a = Array2::zeros((self.k, self.k));
                for (i, &j) in p.iter().enumerate() {
                    a[[i, j]] = 1.0 / self.k as f64;
                }
                a
            }
            Plan::Dense(a) => a.clone(),
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        match &self.plan {
            Plan::Permutation(_) => vec![1.0 / self.k as f64; self.k],
            Plan::Dense(a) => a.rows().into_iter().map(|r| r.sum()).collect(),
        }
    }

    pub fn col_sums(&self) -> Vec<f64> {
        match &self.plan {
            Plan::Permutation(_) => vec![1.0 / self.k as f64; self.k],
            Plan::Dense(a) => a.columns().into_iter().map(|c| c.sum()).collect(),
        }
    }

    /// Largest absolute deviation of any row or column sum from 1/k.
    pub fn marginal_violation(&self) -> f64 {
        let target = 1.0 / self.k as f64;
        self.row_sums()
            .into_iter()
            .chain(self.col_sums())
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }

    /// `⟨A, C⟩`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        let c = cost.as_array();
        match &self.plan {
            Plan::Permutation(p) => p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / self.k as f64,
            Plan::Dense(a) => a.iter().zip(c.iter()).map(|(x, y)| x * y).sum(),
        }
    }
}

/// Which solver computes minibatch couplings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtSolver {
    Exact,
    Entropic {
        epsilon: f64,
        max_iters: usize,
        marginal_tol: f64,
    },
}

impl OtSolver {
    pub fn solve(&self, cost: &CostMatrix) -> Result<Coupling> {
        match *self {
            OtSolver::Exact => solve_exact(cost),
            OtSolver::Entropic {
                epsilon,
                max_iters,
                marginal_tol,
            } => solve_entropic(cost, epsilon, max_iters, marginal_tol),
        }
    }
}

/// Exact OT with uniform marginals: a minimum-cost perfect assignment scaled
/// by 1/k. Shortest-augmenting-path Kuhn–Munkres with row/column potentials,
/// O(k³) worst case.
pub fn solve_exact(cost: &CostMatrix) -> Result<Coupling> {
    let k = cost.k();
    if k == 0 {
        return Err(Error::invalid("cannot solve an empty transport problem"));
    }
    let flat: Vec<f64> = cost.as_array().iter().copied().collect();
    let perm = assign(&flat, k);
    Coupling::from_permutation(perm)
}

/// Returns `perm` with row `i` assigned to column `perm[i]`.
fn assign(c: &[f64], n: usize) -> Vec<usize> {
    // 1-based potentials/matching; index 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let row = &c[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[col_owner[j] - 1] = j - 1;
    }
    perm
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT via log-domain Sinkhorn iterations with uniform marginals.
/// `epsilon` is relative to the largest cost entry.
pub fn solve_entropic(cost: &CostMatrix, epsilon: f64, max_iters: usize, marginal_tol: f64) -> Result<Coupling> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let k = cost.k();
    if k == 0 {
        return Err(Error::invalid("cannot solve an empty transport problem"));
    }
    let raw = cost.as_array();
    let scale = raw.iter().copied().fold(0.0, f64::max);
    let c = if scale > 0.0 { raw / scale } else { raw.clone() };
    let log_marginal = -(k as f64).ln();
    let mut f = vec![0.0f64; k];
    let mut g = vec![0.0f64; k];
    let plan =
        |f: &[f64], g: &[f64]| Array2::from_shape_fn((k, k), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / epsilon).exp());
    let mut violation = f64::INFINITY;
    for _ in 0..max_iters {
        for i in 0..k {
            let lse = log_sum_exp((0..k).map(|j| (g[j] - c[[i, j]]) / epsilon));
            f[i] = epsilon * (log_marginal - lse);
        }
        for j in 0..k {
            let lse = log_sum_exp((0..k).map(|i| (f[i] - c[[i, j]]) / epsilon));
            g[j] = epsilon * (log_marginal - lse);
        }
        // columns are exact after the g-update; rows carry the residual
        violation = (0..k)
            .map(|i| {
                let row = log_sum_exp((0..k).map(|j| (f[i] + g[j] - c[[i, j]]) / epsilon)).exp();
                (row - 1.0 / k as f64).abs()
            })
            .fold(0.0, f64::max);
        if violation < marginal_tol {
            return Coupling::from_dense(plan(&f, &g));
        }
    }
    Err(Error::NonConvergence {
        iters: max_iters,
        violation,
    })
}

/// Draws `count` index pairs i.i.d. with probability `A[i][j]`.
pub fn sample_pairs<R: Rng + ?Sized>(coupling: &Coupling, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let k = coupling.k;
    match &coupling.plan {
        Plan::Permutation(p) => (0..count)
            .map(|_| {
                let i = rng.random_range(0..k);
                (i, p[i])
            })
            .collect(),
        Plan::Dense(a) => {
            let mut cumulative = Vec::with_capacity(k * k);
            let mut acc = 0.0;
            for &w in a.iter() {
                acc += w;
                cumulative.push(acc);
            }
            let total = acc;
            let last_positive = a
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)
                .last()
                .unwrap_or(0);
            (0..count)
                .map(|_| {
                    let u = rng.random::<f64>() * total;
                    // zero-mass cells share their predecessor's cumulative value and are never selected
                    let idx = cumulative.partition_point(|&c| c <= u).min(last_positive);
                    (idx / k, idx % k)
                })
                .collect()
        }
    }
}
