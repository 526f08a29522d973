//! Small dense linear programs: `max cᵀp` subject to equality rows,
//! `≤` rows and `p ≥ 0`. Two-phase primal simplex on a dense tableau with
//! Bland's rule, plus a basis-enumeration oracle for cross-checking.

use thiserror::Error;

use crate::linalg::{Mat, Vector};

pub const MAX_VARIABLES: usize = 64;
pub const MAX_ENUMERATION_VARIABLES: usize = 10;
const MAX_PIVOTS: usize = 50_000;
const PIVOT_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex exceeded {0} pivots")]
    CycleLimitExceeded(usize),
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("malformed instance: {0}")]
    Malformed(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpInstance {
    /// Maximized objective.
    pub c: Vec<f64>,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    /// Rows of `ineq_rows · p ≤ ineq_rhs`.
    pub ineq_rows: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub value: f64,
    pub p: Vec<f64>,
    pub pivots: usize,
}

impl LpInstance {
    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn check(&self) -> Result<(), LpError> {
        let k = self.c.len();
        if k == 0 {
            return Err(LpError::Malformed("no variables".into()));
        }
        if k > MAX_VARIABLES {
            return Err(LpError::TooLarge(format!("{k} variables > {MAX_VARIABLES}")));
        }
        if self.eq_rows.len() != self.eq_rhs.len() || self.ineq_rows.len() != self.ineq_rhs.len() {
            return Err(LpError::Malformed("row and right-hand side counts differ".into()));
        }
        let rows = self.eq_rows.iter().chain(&self.ineq_rows);
        for row in rows {
            if row.len() != k {
                return Err(LpError::Malformed(format!("row of length {} for {k} variables", row.len())));
            }
        }
        let finite = self
            .c
            .iter()
            .chain(self.eq_rows.iter().flatten())
            .chain(&self.eq_rhs)
            .chain(self.ineq_rows.iter().flatten())
            .chain(&self.ineq_rhs)
            .all(|v| v.is_finite());
        if !finite {
            return Err(LpError::Malformed("non-finite entry".into()));
        }
        Ok(())
    }

    /// Maximum residual of the constraints at `p` (positive means violated).
    pub fn max_violation(&self, p: &[f64]) -> f64 {
        let dot = |r: &[f64]| r.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
        let eq = self.eq_rows.iter().zip(&self.eq_rhs).map(|(r, b)| (dot(r) - b).abs());
        let ineq = self.ineq_rows.iter().zip(&self.ineq_rhs).map(|(r, b)| dot(r) - b);
        let bounds = p.iter().map(|v| -v);
        eq.chain(ineq).chain(bounds).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn objective(&self, p: &[f64]) -> f64 {
        self.c.iter().zip(p).map(|(a, b)| a * b).sum()
    }
}

/// Probability vectors on scalar support `points` with zero mean and second
/// moment at most `sigma2`:
/// `Σp = 1`, `Σ w_j p_j = 0`, `Σ w_j² p_j ≤ σ²`, `p ≥ 0`.
/// The objective is left at zero.
pub fn scalar_moment_polytope(points: &[f64], sigma2: f64) -> LpInstance {
    let k = points.len();
    LpInstance {
        c: vec![0.0; k],
        eq_rows: vec![vec![1.0; k], points.to_vec()],
        eq_rhs: vec![1.0, 0.0],
        ineq_rows: vec![points.iter().map(|w| w * w).collect()],
        ineq_rhs: vec![sigma2],
    }
}

/// Moment polytope for vector support. Only scalar disturbances give a
/// linear program; higher dimensions need a semidefinite constraint.
pub fn moment_polytope(points: &[Vec<f64>], sigma: &Mat) -> Result<LpInstance, LpError> {
    let dim = points.first().map_or(0, Vec::len);
    if dim != 1 || sigma.nrows() != 1 || points.iter().any(|w| w.len() != 1) {
        return Err(LpError::Unsupported(
            "the second-moment constraint is linear only for scalar disturbances".into(),
        ));
    }
    let scalars: Vec<f64> = points.iter().map(|w| w[0]).collect();
    Ok(scalar_moment_polytope(&scalars, sigma[(0, 0)]))
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `rows × (cols + 1)`, last column is the right-hand side.
    a: Vec<f64>,
    /// Reduced costs `c_j − c_Bᵀ B⁻¹ A_j`; the last entry is `−c_Bᵀ x_B`.
    cost: Vec<f64>,
    basis: Vec<usize>,
    pivots: usize,
    pivot_tol: f64,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * (self.cols + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    fn pivot(&mut self, r: usize, e: usize) {
        let w = self.cols + 1;
        let piv = self.a[r * w + e];
        for j in 0..w {
            self.a[r * w + j] /= piv;
        }
        self.a[r * w + e] = 1.0;
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.a[i * w + e];
            if f != 0.0 {
                for j in 0..w {
                    self.a[i * w + j] -= f * self.a[r * w + j];
                }
                self.a[i * w + e] = 0.0;
            }
        }
        let f = self.cost[e];
        if f != 0.0 {
            for j in 0..w {
                self.cost[j] -= f * self.a[r * w + j];
            }
            self.cost[e] = 0.0;
        }
        self.basis[r] = e;
        self.pivots += 1;
    }

    fn set_costs(&mut self, costs: &[f64]) {
        self.cost = costs.to_vec();
        self.cost.push(0.0);
        for i in 0..self.rows {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                for j in 0..=self.cols {
                    self.cost[j] -= cb * self.a[i * (self.cols + 1) + j];
                }
            }
        }
    }

    /// Primal simplex with Bland's rule over columns `< allowed`.
    fn optimize(&mut self, allowed: usize, cost_tol: f64) -> Result<(), LpError> {
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(LpError::CycleLimitExceeded(MAX_PIVOTS));
            }
            let Some(e) = (0..allowed).find(|&j| self.cost[j] > cost_tol) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let aie = self.at(i, e);
                if aie > self.pivot_tol {
                    let ratio = self.rhs(i) / aie;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14 * lr.abs().max(1.0)
                                || (ratio <= lr + 1e-14 * lr.abs().max(1.0) && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Err(LpError::Unbounded);
            };
            self.pivot(r, e);
        }
    }
}

/// Maximizes `cᵀp` over the instance's polytope.
pub fn solve_max(instance: &LpInstance) -> Result<LpSolution, LpError> {
    instance.check()?;
    let k = instance.num_vars();
    let n_eq = instance.eq_rows.len();
    let n_ineq = instance.ineq_rows.len();
    let rows = n_eq + n_ineq;
    // Columns: originals | slacks | artificials.
    let n_struct = k + n_ineq;
    let cols = n_struct + rows;
    let w = cols + 1;

    let mut a = vec![0.0; rows * w];
    for (i, (row, rhs)) in instance
        .eq_rows
        .iter()
        .zip(&instance.eq_rhs)
        .chain(instance.ineq_rows.iter().zip(&instance.ineq_rhs))
        .enumerate()
    {
        let sign = if *rhs < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in row.iter().enumerate() {
            a[i * w + j] = sign * v;
        }
        if i >= n_eq {
            a[i * w + k + (i - n_eq)] = sign;
        }
        a[i * w + n_struct + i] = 1.0;
        a[i * w + cols] = sign * rhs;
    }
    let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut tab = Tableau {
        rows,
        cols,
        a,
        cost: Vec::new(),
        basis: (n_struct..cols).collect(),
        pivots: 0,
        pivot_tol: PIVOT_TOLERANCE * scale,
    };

    // Phase 1: maximize −Σ artificials.
    let mut phase1 = vec![0.0; cols];
    for c in phase1.iter_mut().skip(n_struct) {
        *c = -1.0;
    }
    tab.set_costs(&phase1);
    tab.optimize(cols, PIVOT_TOLERANCE)?;
    let infeasibility = tab.cost[cols];
    if infeasibility > 1e-9 * scale {
        return Err(LpError::Infeasible);
    }

    // Drive zero-level artificials out of the basis; drop redundant rows.
    let mut i = 0;
    while i < tab.rows {
        if tab.basis[i] >= n_struct {
            let entering = (0..n_struct).find(|&j| tab.at(i, j).abs() > tab.pivot_tol);
            match entering {
                Some(j) => tab.pivot(i, j),
                None => {
                    let w = tab.cols + 1;
                    tab.a.drain(i * w..(i + 1) * w);
                    tab.basis.remove(i);
                    tab.rows -= 1;
                    continue;
                }
            }
        }
        i += 1;
    }

    // Phase 2 over structural columns only.
    let mut phase2 = vec![0.0; cols];
    phase2[..k].copy_from_slice(&instance.c);
    tab.set_costs(&phase2);
    let cost_scale = instance.c.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    tab.optimize(n_struct, PIVOT_TOLERANCE * cost_scale)?;

    let mut p = vec![0.0; k];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < k {
            p[b] = tab.rhs(i).max(0.0);
        }
    }
    Ok(LpSolution { value: -tab.cost[cols], p, pivots: tab.pivots })
}

/// All basic feasible solutions, by trying every `k`-subset of the
/// constraint pool (equalities, inequalities and bounds) as the active set.
pub fn enumerate_vertices(instance: &LpInstance) -> Result<Vec<Vec<f64>>, LpError> {
    instance.check()?;
    let k = instance.num_vars();
    if k > MAX_ENUMERATION_VARIABLES {
        return Err(LpError::TooLarge(format!("{k} variables > {MAX_ENUMERATION_VARIABLES}")));
    }
    let mut pool: Vec<(Vec<f64>, f64)> = Vec::new();
    pool.extend(instance.eq_rows.iter().cloned().zip(instance.eq_rhs.iter().copied()));
    pool.extend(instance.ineq_rows.iter().cloned().zip(instance.ineq_rhs.iter().copied()));
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        pool.push((e, 0.0));
    }
    if pool.len() > 24 {
        return Err(LpError::TooLarge(format!("{} constraints to enumerate", pool.len())));
    }

    let scale = pool
        .iter()
        .flat_map(|(r, b)| r.iter().chain(std::iter::once(b)))
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let m = Mat::from_fn(k, k, |i, j| pool[subset[i]].0[j]);
        let rhs = Vector::from_iterator(k, subset.iter().map(|&i| pool[i].1));
        let sv = m.clone().singular_values();
        let smax = sv.iter().copied().fold(0.0, f64::max);
        let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if smax > 0.0 && smin > 1e-12 * smax {
            if let Some(sol) = m.lu().solve(&rhs) {
                let p: Vec<f64> = sol.iter().copied().collect();
                if instance.max_violation(&p) <= tol
                    && !vertices.iter().any(|v| v.iter().zip(&p).all(|(a, b)| (a - b).abs() <= tol))
                {
                    vertices.push(p);
                }
            }
        }
        if !next_combination(&mut subset, pool.len()) {
            break;
        }
    }
    Ok(vertices)
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
