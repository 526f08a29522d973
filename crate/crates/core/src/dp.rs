//! Value iteration on the scalar augmented state `(x, s)`.
//!
//! `V_t(x, s)` is the worst-case (or expected) value of `max(Z − s, 0)` from
//! time `t`, where `Z` is the remaining cost. The robust sweep takes the
//! adversary's supremum over finitely supported distributions with a moment
//! bound through [`crate::lp::solve_max`]; the known-distribution sweeps use a
//! fixed discrete law (Gauss–Hermite nodes for a Gaussian).

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{Mat, Vector};
use crate::lp::{self, LpError, LpInstance};
use crate::model::LqProblem;
use crate::policy::{self, GridPolicy, Policy, PolicyError};
use crate::quadrature::GaussHermite;
use crate::riccati::{self, AcvarSchedule, RiccatiError};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid disturbance: {0}")]
    BadDistribution(String),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("inner linear program failed: {0}")]
    Lp(#[from] LpError),
    #[error("probability tree with {k}^{horizon} paths is too large (limit 4^4)")]
    TreeTooLarge { k: usize, horizon: usize },
    #[error("path enumeration gave {enumerated} but the backward recursion gave {recursive}")]
    OracleMismatch { enumerated: f64, recursive: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
}

fn require_scalar(problem: &LqProblem) -> Result<(), DpError> {
    if problem.is_scalar() {
        Ok(())
    } else {
        Err(DpError::Unsupported(format!(
            "robust DP requires scalar disturbances (got n = {}, m = {}); the vector case needs a semidefinite program",
            problem.n(),
            problem.m()
        )))
    }
}

/// State, budget and control nodes of the discretization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid2 {
    pub x_nodes: Vec<f64>,
    pub s_nodes: Vec<f64>,
    pub u_nodes: Vec<f64>,
}

fn check_axis(name: &str, nodes: &[f64], min_len: usize) -> Result<(), DpError> {
    if nodes.len() < min_len {
        return Err(DpError::InvalidGrid(format!("{name} needs at least {min_len} nodes")));
    }
    if nodes.iter().any(|v| !v.is_finite()) {
        return Err(DpError::InvalidGrid(format!("{name} has a non-finite node")));
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DpError::InvalidGrid(format!("{name} nodes are not strictly increasing")));
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (count - 1) as f64;
    (0..count)
        .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
        .collect()
}

impl Grid2 {
    pub fn new(x_nodes: Vec<f64>, s_nodes: Vec<f64>, u_nodes: Vec<f64>) -> Result<Self, DpError> {
        check_axis("x", &x_nodes, 2)?;
        check_axis("s", &s_nodes, 2)?;
        check_axis("u", &u_nodes, 1)?;
        Ok(Grid2 { x_nodes, s_nodes, u_nodes })
    }

    /// Uniform nodes on each axis. A zero-width control range gives the
    /// single node at its center.
    pub fn uniform(
        x_range: (f64, f64),
        nx: usize,
        s_range: (f64, f64),
        ns: usize,
        u_range: (f64, f64),
        nu: usize,
    ) -> Result<Self, DpError> {
        let u_nodes = if u_range.1 > u_range.0 { linspace(u_range.0, u_range.1, nu) } else { vec![u_range.0] };
        Self::new(linspace(x_range.0, x_range.1, nx), linspace(s_range.0, s_range.1, ns), u_nodes)
    }

    /// Grid sized from the problem: `|x| ≤ ρ(|x0| + 6√(ΣN))` where `ρ` is the
    /// worst closed-loop LQR growth over the horizon, controls within
    /// `±2·max|K|·x_max`, budgets in `[−N·max stage cost, 1.5·x_max²·P_0]`.
    pub fn covering(problem: &LqProblem, x0: f64, nx: usize, ns: usize, nu: usize) -> Result<Self, DpError> {
        require_scalar(problem)?;
        let lqr = riccati::lqr_recursion(problem)?;
        let (a, b) = (problem.a[(0, 0)], problem.b[(0, 0)]);
        let gains: Vec<f64> = lqr.k.iter().map(|k| k[(0, 0)]).collect();
        let growth: f64 = gains.iter().map(|k| (a + b * k).abs().max(1.0)).product();
        let horizon = problem.horizon as f64;
        let x_max = growth * (x0.abs() + 6.0 * (problem.sigma[(0, 0)] * horizon).sqrt());
        let u_max = lqr_control_span(&gains, x_max);
        let worst_stage = problem.q[(0, 0)] * x_max * x_max + problem.r[(0, 0)] * u_max * u_max;
        let s_lo = -horizon * worst_stage;
        let s_hi = 1.5 * x_max * x_max * lqr.p[0][(0, 0)];
        Self::uniform((-x_max, x_max), nx, (s_lo, s_hi), ns, (-u_max, u_max), nu)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.x_nodes.len(), self.s_nodes.len(), self.u_nodes.len())
    }
}

/// `2·max_t |K_t|·x_max`, the control half-width used for u grids.
pub fn lqr_control_span(gains: &[f64], x_max: f64) -> f64 {
    2.0 * gains.iter().fold(0.0_f64, |m, k| m.max(k.abs())) * x_max
}

/// Finite scalar support with the moment ambiguity set
/// `{p ≥ 0 : Σp = 1, Σ p_j w_j = 0, Σ p_j w_j² ≤ σ²}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDisturbance {
    pub points: Vec<f64>,
    pub sigma2: f64,
}

impl FiniteDisturbance {
    pub fn new(points: Vec<f64>, sigma2: f64) -> Result<Self, DpError> {
        if points.len() < 2 {
            return Err(DpError::BadDistribution("support needs at least two points".into()));
        }
        if points.iter().any(|w| !w.is_finite()) || !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(DpError::BadDistribution("support and variance must be finite, variance positive".into()));
        }
        let d = FiniteDisturbance { points, sigma2 };
        match lp::solve_max(&d.polytope()) {
            Ok(_) => Ok(d),
            Err(LpError::Infeasible) => {
                Err(DpError::BadDistribution("the moment polytope of this support is empty".into()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn polytope(&self) -> LpInstance {
        lp::scalar_moment_polytope(&self.points, self.sigma2)
    }
}

/// A fixed law on finitely many scalar points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteDistribution {
    pub points: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(points: Vec<f64>, probs: Vec<f64>) -> Result<Self, DpError> {
        if points.is_empty() || points.len() != probs.len() {
            return Err(DpError::BadDistribution("points and probabilities must be nonempty and aligned".into()));
        }
        if points.iter().chain(&probs).any(|v| !v.is_finite()) || probs.iter().any(|p| *p < 0.0) {
            return Err(DpError::BadDistribution("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DpError::BadDistribution(format!("probabilities sum to {total}")));
        }
        Ok(DiscreteDistribution { points, probs })
    }

    /// Equal weights on `points`.
    pub fn uniform(points: Vec<f64>) -> Result<Self, DpError> {
        let k = points.len().max(1);
        Self::new(points, vec![1.0 / k as f64; k])
    }

    /// Gauss–Hermite law for `N(0, std²)`.
    pub fn gauss_hermite(std: f64, order: usize) -> Self {
        let rule = GaussHermite::scaled(order, std);
        DiscreteDistribution { points: rule.nodes, probs: rule.weights }
    }
}

/// Options of a backward sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Refine each argmin by golden-section search on its bracketing cell.
    pub golden_polish: bool,
    pub parallel: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { golden_polish: true, parallel: true }
    }
}

/// Value tables `values[t]` (`x_nodes × s_nodes`, `t = 0…N`) and argmin
/// control tables `policy[t]` (`t = 0…N−1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub grids: Grid2,
    pub values: Vec<Mat>,
    pub policy: Vec<Mat>,
    pub problem: LqProblem,
}

/// Evaluation of one layer off the grid.
///
/// Inside: bilinear. Below the smallest budget node the value grows with
/// slope one, which is exact once that node is at most zero because the
/// remaining cost is nonnegative. Above the largest budget node it is held
/// constant. Beyond the state range it continues as
/// `V(x_b, s) + Qf·(x² − x_b²)`.
#[derive(Clone, Copy)]
struct Layer<'a> {
    grids: &'a Grid2,
    /// `None` is the terminal layer, evaluated in closed form.
    table: Option<&'a Mat>,
    qf: f64,
}

fn bracket(nodes: &[f64], v: f64) -> (usize, f64) {
    let last = nodes.len() - 1;
    let i = nodes.partition_point(|n| *n <= v).clamp(1, last) - 1;
    let w = (v - nodes[i]) / (nodes[i + 1] - nodes[i]);
    (i, w)
}

impl<'a> Layer<'a> {
    fn along_s(&self, table: &Mat, i: usize, s: f64) -> f64 {
        let s_nodes = &self.grids.s_nodes;
        let last = s_nodes.len() - 1;
        if s <= s_nodes[0] {
            return table[(i, 0)] + (s_nodes[0] - s);
        }
        if s >= s_nodes[last] {
            return table[(i, last)];
        }
        let (j, w) = bracket(s_nodes, s);
        (1.0 - w) * table[(i, j)] + w * table[(i, j + 1)]
    }

    fn value(&self, x: f64, s: f64) -> f64 {
        let Some(table) = self.table else {
            return (self.qf * x * x - s).max(0.0);
        };
        let x_nodes = &self.grids.x_nodes;
        let last = x_nodes.len() - 1;
        if x <= x_nodes[0] {
            let xb = x_nodes[0];
            return self.along_s(table, 0, s) + self.qf * (x * x - xb * xb).max(0.0);
        }
        if x >= x_nodes[last] {
            let xb = x_nodes[last];
            return self.along_s(table, last, s) + self.qf * (x * x - xb * xb).max(0.0);
        }
        let (i, w) = bracket(x_nodes, x);
        (1.0 - w) * self.along_s(table, i, s) + w * self.along_s(table, i + 1, s)
    }
}

/// How the successor values are aggregated.
enum Aggregate<'a> {
    Robust(&'a FiniteDisturbance),
    Fixed(&'a DiscreteDistribution),
}

impl Aggregate<'_> {
    fn points(&self) -> &[f64] {
        match self {
            Aggregate::Robust(d) => &d.points,
            Aggregate::Fixed(d) => &d.points,
        }
    }
}

struct Scalars {
    a: f64,
    b: f64,
    q: f64,
    r: f64,
}

impl Scalars {
    fn of(problem: &LqProblem) -> Self {
        Scalars { a: problem.a[(0, 0)], b: problem.b[(0, 0)], q: problem.q[(0, 0)], r: problem.r[(0, 0)] }
    }
}

/// Per-thread scratch for the objective `ψ(u)` at a fixed node.
struct NodeObjective<'a> {
    sys: &'a Scalars,
    agg: &'a Aggregate<'a>,
    next: Layer<'a>,
    lp: Option<LpInstance>,
    x: f64,
    s: f64,
}

impl NodeObjective<'_> {
    fn eval(&mut self, u: f64) -> Result<f64, DpError> {
        let sys = self.sys;
        let budget = self.s - sys.q * self.x * self.x - sys.r * u * u;
        let drift = sys.a * self.x + sys.b * u;
        match self.agg {
            Aggregate::Fixed(d) => Ok(d
                .points
                .iter()
                .zip(&d.probs)
                .map(|(w, p)| p * self.next.value(drift + w, budget))
                .sum()),
            Aggregate::Robust(_) => {
                let lp = self.lp.as_mut().expect("robust sweeps carry an LP template");
                for (c, w) in lp.c.iter_mut().zip(self.agg.points()) {
                    *c = self.next.value(drift + w, budget);
                }
                Ok(lp::solve_max(lp)?.value)
            }
        }
    }
}

/// Whether `(v, u)` should replace the incumbent `(best_v, best_u)`: strictly
/// lower value, or a tie broken toward smaller `|u|` and then negative `u`.
fn improves(v: f64, u: f64, best_v: f64, best_u: f64) -> bool {
    let tie = 1e-12 * (1.0 + best_v.abs());
    if v < best_v - tie {
        return true;
    }
    if v > best_v + tie {
        return false;
    }
    u.abs() < best_u.abs() || (u.abs() == best_u.abs() && u < best_u)
}

const GOLDEN_ITERATIONS: usize = 60;

fn minimize_node(obj: &mut NodeObjective<'_>, u_nodes: &[f64], polish: bool) -> Result<(f64, f64), DpError> {
    let mut best = (f64::INFINITY, 0.0);
    let mut best_idx = 0;
    for (idx, &u) in u_nodes.iter().enumerate() {
        let v = obj.eval(u)?;
        if idx == 0 || improves(v, u, best.0, best.1) {
            best = (v, u);
            best_idx = idx;
        }
    }
    if !polish || u_nodes.len() < 3 {
        return Ok(best);
    }
    let mut lo = u_nodes[best_idx.saturating_sub(1)];
    let mut hi = u_nodes[(best_idx + 1).min(u_nodes.len() - 1)];
    let ratio = 0.5 * (5.0_f64.sqrt() - 1.0);
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let mut fc = obj.eval(c)?;
    let mut fd = obj.eval(d)?;
    for _ in 0..GOLDEN_ITERATIONS {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = obj.eval(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = obj.eval(d)?;
        }
    }
    let (u, v) = if fc <= fd { (c, fc) } else { (d, fd) };
    if v < best.0 - 1e-12 * (1.0 + best.0.abs()) {
        best = (v, u);
    }
    Ok(best)
}

fn sweep(problem: &LqProblem, agg: Aggregate<'_>, grids: &Grid2, opts: SweepOptions) -> Result<ValueGrid, DpError> {
    require_scalar(problem)?;
    check_axis("x", &grids.x_nodes, 2)?;
    check_axis("s", &grids.s_nodes, 2)?;
    check_axis("u", &grids.u_nodes, 1)?;
    let horizon = problem.horizon;
    let (nx, ns, _) = grids.shape();
    let qf = problem.qf[(0, 0)];
    let sys = Scalars::of(problem);

    let terminal = Mat::from_fn(nx, ns, |i, j| {
        let x = grids.x_nodes[i];
        (qf * x * x - grids.s_nodes[j]).max(0.0)
    });
    let mut values = vec![Mat::zeros(nx, ns); horizon + 1];
    let mut policy = vec![Mat::zeros(nx, ns); horizon];
    values[horizon] = terminal;

    let template = match &agg {
        Aggregate::Robust(d) => Some(d.polytope()),
        Aggregate::Fixed(_) => None,
    };

    for t in (0..horizon).rev() {
        let next = Layer { grids, table: (t + 1 < horizon).then(|| &values[t + 1]), qf };
        let row = |i: usize| -> Result<Vec<(f64, f64)>, DpError> {
            let mut obj = NodeObjective { sys: &sys, agg: &agg, next, lp: template.clone(), x: grids.x_nodes[i], s: 0.0 };
            grids
                .s_nodes
                .iter()
                .map(|&s| {
                    obj.s = s;
                    minimize_node(&mut obj, &grids.u_nodes, opts.golden_polish)
                })
                .collect()
        };
        let rows: Vec<Vec<(f64, f64)>> = if opts.parallel {
            (0..nx).into_par_iter().map(row).collect::<Result<_, _>>()?
        } else {
            (0..nx).map(row).collect::<Result<_, _>>()?
        };
        let mut v = Mat::zeros(nx, ns);
        let mut u = Mat::zeros(nx, ns);
        for (i, r) in rows.iter().enumerate() {
            for (j, (val, ctrl)) in r.iter().enumerate() {
                v[(i, j)] = *val;
                u[(i, j)] = *ctrl;
            }
        }
        values[t] = v;
        policy[t] = u;
    }
    Ok(ValueGrid { grids: grids.clone(), values, policy, problem: problem.clone() })
}

/// Backward sweep with the adversary's supremum over the moment polytope.
pub fn robust_value_iteration(
    problem: &LqProblem,
    dist: &FiniteDisturbance,
    grids: &Grid2,
) -> Result<ValueGrid, DpError> {
    robust_value_iteration_with(problem, dist, grids, SweepOptions::default())
}

pub fn robust_value_iteration_with(
    problem: &LqProblem,
    dist: &FiniteDisturbance,
    grids: &Grid2,
    opts: SweepOptions,
) -> Result<ValueGrid, DpError> {
    sweep(problem, Aggregate::Robust(dist), grids, opts)
}

/// Backward sweep with expectations under `N(0, gauss_std²)` by
/// Gauss–Hermite quadrature of order `quad_order`.
pub fn known_dist_value_iteration(
    problem: &LqProblem,
    gauss_std: f64,
    quad_order: usize,
    grids: &Grid2,
) -> Result<ValueGrid, DpError> {
    known_dist_value_iteration_with(problem, gauss_std, quad_order, grids, SweepOptions::default())
}

pub fn known_dist_value_iteration_with(
    problem: &LqProblem,
    gauss_std: f64,
    quad_order: usize,
    grids: &Grid2,
    opts: SweepOptions,
) -> Result<ValueGrid, DpError> {
    require_scalar(problem)?;
    if quad_order < 8 {
        return Err(DpError::BadParameter(format!("quadrature order {quad_order} is below 8")));
    }
    if !(gauss_std > 0.0) || gauss_std * gauss_std > problem.sigma[(0, 0)] * (1.0 + 1e-12) {
        return Err(DpError::BadParameter(format!(
            "Gaussian std {gauss_std} must be positive with variance at most Sigma"
        )));
    }
    let dist = DiscreteDistribution::gauss_hermite(gauss_std, quad_order);
    sweep(problem, Aggregate::Fixed(&dist), grids, opts)
}

/// Backward sweep with expectations under a fixed discrete law.
pub fn fixed_dist_value_iteration(
    problem: &LqProblem,
    dist: &DiscreteDistribution,
    grids: &Grid2,
    opts: SweepOptions,
) -> Result<ValueGrid, DpError> {
    sweep(problem, Aggregate::Fixed(dist), grids, opts)
}

/// Every ValueGrid invariant, with the worst offending amount of each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub terminal_exact: bool,
    pub min_value: f64,
    /// Largest increase of `V` along increasing `s`, relative to the layer scale.
    pub worst_s_increase: f64,
    /// Most negative second difference along `x`, relative to the layer scale.
    pub worst_x_concavity: f64,
    /// The same quantity for each layer `t = 0…N`.
    pub x_concavity_by_layer: Vec<f64>,
    pub tolerance: f64,
}

impl InvariantReport {
    pub fn nonnegative(&self) -> bool {
        self.min_value >= 0.0
    }

    pub fn s_monotone(&self) -> bool {
        self.worst_s_increase <= self.tolerance
    }

    pub fn x_convex(&self) -> bool {
        self.worst_x_concavity >= -self.tolerance
    }

    pub fn all_hold(&self) -> bool {
        self.terminal_exact && self.nonnegative() && self.s_monotone() && self.x_convex()
    }
}

impl ValueGrid {
    pub fn horizon(&self) -> usize {
        self.policy.len()
    }

    /// Interpolated `V_t(x, s)` with the same off-grid rules as the sweep.
    pub fn value(&self, t: usize, x: f64, s: f64) -> f64 {
        let layer = Layer { grids: &self.grids, table: Some(&self.values[t]), qf: self.problem.qf[(0, 0)] };
        layer.value(x, s)
    }

    pub fn check_invariants(&self) -> InvariantReport {
        const TOL: f64 = 1e-9;
        let g = &self.grids;
        let qf = self.problem.qf[(0, 0)];
        let horizon = self.horizon();
        let terminal_exact = (0..g.x_nodes.len()).all(|i| {
            (0..g.s_nodes.len()).all(|j| {
                let x = g.x_nodes[i];
                self.values[horizon][(i, j)] == (qf * x * x - g.s_nodes[j]).max(0.0)
            })
        });
        let mut min_value = f64::INFINITY;
        let mut worst_s_increase = f64::NEG_INFINITY;
        let mut x_concavity_by_layer = Vec::with_capacity(self.values.len());
        for v in &self.values {
            let scale = v.amax().max(1.0);
            min_value = min_value.min(v.min());
            for i in 0..v.nrows() {
                for j in 1..v.ncols() {
                    worst_s_increase = worst_s_increase.max((v[(i, j)] - v[(i, j - 1)]) / scale);
                }
            }
            let mut layer_worst = f64::INFINITY;
            for j in 0..v.ncols() {
                for i in 1..v.nrows() - 1 {
                    let d2 = second_difference(&g.x_nodes, i, |k| v[(k, j)]);
                    layer_worst = layer_worst.min(d2 / scale);
                }
            }
            x_concavity_by_layer.push(layer_worst);
        }
        let worst_x_concavity = x_concavity_by_layer.iter().copied().fold(f64::INFINITY, f64::min);
        InvariantReport { terminal_exact, min_value, worst_s_increase, worst_x_concavity, x_concavity_by_layer, tolerance: TOL }
    }

    /// `argmin_s s + V_0(x0, s)/α` over the budget nodes, keeping the
    /// smallest node within round-off of the minimum. Returns `(s*, value)`.
    pub fn best_budget(&self, x0: f64, alpha: f64) -> Result<(f64, f64), DpError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(DpError::BadParameter(format!("alpha {alpha} outside (0, 1]")));
        }
        let objective: Vec<f64> = self.grids.s_nodes.iter().map(|&s| s + self.value(0, x0, s) / alpha).collect();
        let min = objective.iter().copied().fold(f64::INFINITY, f64::min);
        let tol = 1e-9 * (1.0 + min.abs());
        let j = objective.iter().position(|v| *v <= min + tol).expect("nonempty grid");
        Ok((self.grids.s_nodes[j], objective[j]))
    }

    /// CSV rows `t,x,s,value,u_star`; `u_star` is empty on the terminal layer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DpError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "s", "value", "u_star"])?;
        for (t, v) in self.values.iter().enumerate() {
            for (i, x) in self.grids.x_nodes.iter().enumerate() {
                for (j, s) in self.grids.s_nodes.iter().enumerate() {
                    let u = self.policy.get(t).map_or(String::new(), |p| p[(i, j)].to_string());
                    w.write_record([t.to_string(), x.to_string(), s.to_string(), v[(i, j)].to_string(), u])?;
                }
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, DpError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Three-point second difference at node `i`, scaled to spacing² so it
/// reads as the raw `f(i+1) − 2f(i) + f(i−1)` on a uniform axis.
fn second_difference(nodes: &[f64], i: usize, f: impl Fn(usize) -> f64) -> f64 {
    let hl = nodes[i] - nodes[i - 1];
    let hr = nodes[i + 1] - nodes[i];
    let slope_r = (f(i + 1) - f(i)) / hr;
    let slope_l = (f(i) - f(i - 1)) / hl;
    2.0 * (slope_r - slope_l) / (hl + hr) * hl * hr
}

/// Wraps the argmin tables as a nearest-node policy.
pub fn extract_policy(vg: &ValueGrid) -> Policy {
    Policy::Grid(GridPolicy {
        x_nodes: vg.grids.x_nodes.clone(),
        s_nodes: vg.grids.s_nodes.clone(),
        tables: vg.policy.clone(),
    })
}

/// Outcome of comparing the grid value with the closed-form bound
/// `a_0 + max(x²P_0 − s, 0)` at every node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub passed: bool,
    /// `max (V̄_0 − bound)` over nodes; negative means slack everywhere.
    pub max_violation: f64,
    pub worst_x: f64,
    pub worst_s: f64,
    pub epsilon_grid: f64,
    pub nodes_checked: usize,
}

/// Interpolation error allowance: a quarter of the largest raw second
/// difference (summed over both axes) in the `t = 0` table, plus `1e-8`.
pub fn epsilon_grid(vg: &ValueGrid) -> f64 {
    let v = &vg.values[0];
    let g = &vg.grids;
    let (nx, ns) = v.shape();
    let mut worst = 0.0_f64;
    for i in 0..nx {
        for j in 0..ns {
            let dx = if i > 0 && i + 1 < nx { second_difference(&g.x_nodes, i, |k| v[(k, j)]).abs() } else { 0.0 };
            let ds = if j > 0 && j + 1 < ns { second_difference(&g.s_nodes, j, |k| v[(i, k)]).abs() } else { 0.0 };
            worst = worst.max(dx + ds);
        }
    }
    0.25 * worst + 1e-8
}

pub fn verify_upper_bound(vg: &ValueGrid, schedule: &AcvarSchedule) -> BoundReport {
    let p0 = schedule.p[0][(0, 0)];
    let a0 = schedule.a[0];
    let eps = epsilon_grid(vg);
    let mut report = BoundReport {
        passed: true,
        max_violation: f64::NEG_INFINITY,
        worst_x: f64::NAN,
        worst_s: f64::NAN,
        epsilon_grid: eps,
        nodes_checked: 0,
    };
    for (i, &x) in vg.grids.x_nodes.iter().enumerate() {
        for (j, &s) in vg.grids.s_nodes.iter().enumerate() {
            let bound = a0 + (x * x * p0 - s).max(0.0);
            let excess = vg.values[0][(i, j)] - bound;
            if excess > report.max_violation {
                report.max_violation = excess;
                report.worst_x = x;
                report.worst_s = s;
            }
            report.nodes_checked += 1;
        }
    }
    report.passed = report.max_violation <= eps;
    report
}

/// `E max(Z − s, 0)` from `(x, s)` at `t = 0` under a fixed law, computed by
/// enumerating every disturbance path and, independently, by the backward
/// recursion `W_t = Σ p_j W_{t+1}`. The two must agree to `1e-10`.
pub fn w_recursion_oracle(
    problem: &LqProblem,
    dist: &DiscreteDistribution,
    policy: &Policy,
    x: f64,
    s: f64,
) -> Result<f64, DpError> {
    require_scalar(problem)?;
    let k = dist.points.len();
    let horizon = problem.horizon;
    if k > 4 || horizon > 4 {
        return Err(DpError::TreeTooLarge { k, horizon });
    }

    let mut enumerated = 0.0;
    let paths = k.pow(horizon as u32);
    for path in 0..paths {
        let mut code = path;
        let mut prob = 1.0;
        let mut state = Vector::from_element(1, x);
        let mut budget = s;
        for t in 0..horizon {
            let j = code % k;
            code /= k;
            prob *= dist.probs[j];
            let w = Vector::from_element(1, dist.points[j]);
            let step = policy::rollout_step(policy, &state, budget, t, &w, problem)?;
            state = step.x_next;
            budget = step.s_next;
        }
        enumerated += prob * (problem.terminal_cost(&state) - budget).max(0.0);
    }

    let recursive = w_backward(problem, dist, policy, &Vector::from_element(1, x), s, 0)?;
    if (enumerated - recursive).abs() > 1e-10 * (1.0 + enumerated.abs()) {
        return Err(DpError::OracleMismatch { enumerated, recursive });
    }
    Ok(enumerated)
}

fn w_backward(
    problem: &LqProblem,
    dist: &DiscreteDistribution,
    policy: &Policy,
    x: &Vector,
    s: f64,
    t: usize,
) -> Result<f64, DpError> {
    if t == problem.horizon {
        return Ok((problem.terminal_cost(x) - s).max(0.0));
    }
    let mut total = 0.0;
    for (w, p) in dist.points.iter().zip(&dist.probs) {
        let step = policy::rollout_step(policy, x, s, t, &Vector::from_element(1, *w), problem)?;
        total += p * w_backward(problem, dist, policy, &step.x_next, step.s_next, t + 1)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::acvar_recursion;

    fn bench() -> LqProblem {
        LqProblem::benchmark_scalar()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid2::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0]).is_ok());
        assert!(Grid2::new(vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(Grid2::new(vec![0.0], vec![0.0, 1.0], vec![0.0]).is_err());
        let g = Grid2::uniform((-1.0, 1.0), 5, (0.0, 4.0), 5, (0.0, 0.0), 11).unwrap();
        assert_eq!(g.u_nodes, vec![0.0]);
        assert_eq!(g.x_nodes, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn covering_grid_spans_the_noise_envelope() {
        let g = Grid2::covering(&bench(), 1.0, 21, 21, 101).unwrap();
        let x_max = *g.x_nodes.last().unwrap();
        assert!(x_max >= 1.0 + 6.0 * 2.0);
        assert_eq!(g.u_nodes.len(), 101);
        assert!(g.s_nodes[0] < 0.0 && *g.s_nodes.last().unwrap() > 0.0);
    }

    #[test]
    fn empty_moment_polytope_is_rejected() {
        assert!(FiniteDisturbance::new(vec![1.0, 2.0], 1.0).is_err());
        assert!(FiniteDisturbance::new(vec![-3.0, 3.0], 1.0).is_err());
        assert!(FiniteDisturbance::new(vec![-3.0, 0.0, 3.0], 1.0).is_ok());
    }

    #[test]
    fn terminal_layer_and_large_budget_floor() {
        let p = bench();
        let d = FiniteDisturbance::new(vec![-1.0, 0.0, 1.0], 1.0).unwrap();
        let g = Grid2::uniform((-2.0, 2.0), 9, (-2.0, 60.0), 32, (-2.0, 2.0), 21).unwrap();
        let vg = robust_value_iteration(&p, &d, &g).unwrap();
        let inv = vg.check_invariants();
        assert!(inv.terminal_exact);
        assert!(inv.nonnegative());
        // Budget 60 exceeds every reachable path cost from |x| ≤ 2.
        let last = g.s_nodes.len() - 1;
        for i in 0..g.x_nodes.len() {
            assert_eq!(vg.values[3][(i, last)], 0.0);
        }
    }

    #[test]
    fn two_point_hand_example() {
        // B = 0, one step, x = s = 0: sup of Σ p_j w_j² under the moments is 1.
        let p = LqProblem::scalar(1.0, 0.0, 1e-3, 1.0, 1.0, 1.0, 1).unwrap();
        let d = FiniteDisturbance::new(vec![-1.0, 1.0], 1.0).unwrap();
        let g = Grid2::uniform((-1.0, 1.0), 3, (-1.0, 1.0), 3, (0.0, 0.0), 1).unwrap();
        let vg = robust_value_iteration(&p, &d, &g).unwrap();
        assert!((vg.values[0][(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_tie_prefers_zero_control() {
        let p = bench();
        let d = FiniteDisturbance::new(vec![-1.0, 0.0, 1.0], 1.0).unwrap();
        let g = Grid2::uniform((-2.0, 2.0), 5, (-2.0, 10.0), 7, (-1.0, 1.0), 5).unwrap();
        let opts = SweepOptions { golden_polish: false, parallel: false };
        let vg = robust_value_iteration_with(&p, &d, &g, opts).unwrap();
        for t in 0..4 {
            for j in 0..7 {
                assert_eq!(vg.policy[t][(2, j)], 0.0);
            }
        }
        let pol = extract_policy(&vg);
        match pol {
            Policy::Grid(gp) => {
                assert_eq!(gp.tables.len(), 4);
                assert_eq!(gp.tables[0].shape(), (5, 7));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn tie_breaking_rule() {
        assert!(improves(1.0, 0.5, 1.0, -1.0));
        assert!(improves(1.0, -0.5, 1.0, 0.5));
        assert!(!improves(1.0, 0.5, 1.0, -0.5));
        assert!(improves(0.5, 3.0, 1.0, 0.0));
    }

    #[test]
    fn bilinear_reproduces_bilinear_functions() {
        let g = Grid2::uniform((-1.0, 1.0), 5, (0.0, 2.0), 5, (0.0, 0.0), 1).unwrap();
        let f = |x: f64, s: f64| 3.0 + 2.0 * x - 0.5 * s + 0.25 * x * s;
        let table = Mat::from_fn(5, 5, |i, j| f(g.x_nodes[i], g.s_nodes[j]));
        let layer = Layer { grids: &g, table: Some(&table), qf: 1.0 };
        for (x, s) in [(0.3, 1.1), (-0.77, 0.05), (0.999, 1.999)] {
            assert!((layer.value(x, s) - f(x, s)).abs() < 1e-13);
        }
        // Below the budget range: slope −1.
        assert!((layer.value(0.0, -3.0) - (layer.value(0.0, 0.0) + 3.0)).abs() < 1e-13);
        // Above: constant.
        assert_eq!(layer.value(0.5, 10.0), layer.value(0.5, 2.0));
        // Beyond x: V(x_b, s) + Qf (x² − x_b²).
        assert!((layer.value(2.0, 1.0) - (f(1.0, 1.0) + 3.0)).abs() < 1e-13);
    }

    #[test]
    fn w_oracle_hand_examples() {
        let p = LqProblem::scalar(1.0, 1.0, 1e-3, 1.0, 1.0, 1.0, 1).unwrap();
        let d = DiscreteDistribution::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let v = w_recursion_oracle(&p, &d, &Policy::Zero, 1.0, 0.0).unwrap();
        assert!((v - 2.001).abs() < 1e-12);
        assert_eq!(w_recursion_oracle(&p, &d, &Policy::Zero, 1.0, 1e6).unwrap(), 0.0);
        let det = DiscreteDistribution::new(vec![-1.0, 1.0], vec![1.0, 0.0]).unwrap();
        let v = w_recursion_oracle(&p, &det, &Policy::Zero, 1.0, 0.0).unwrap();
        assert!((v - 1e-3).abs() < 1e-15);

        let big = LqProblem::scalar(1.0, 1.0, 1e-3, 1.0, 1.0, 1.0, 5).unwrap();
        assert!(matches!(
            w_recursion_oracle(&big, &d, &Policy::Zero, 1.0, 0.0),
            Err(DpError::TreeTooLarge { .. })
        ));
    }

    #[test]
    fn vector_problems_are_unsupported() {
        let p = LqProblem::new(
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            2,
        )
        .unwrap();
        let d = FiniteDisturbance::new(vec![-1.0, 1.0], 1.0).unwrap();
        let g = Grid2::uniform((-1.0, 1.0), 3, (0.0, 1.0), 3, (0.0, 0.0), 1).unwrap();
        assert!(matches!(robust_value_iteration(&p, &d, &g), Err(DpError::Unsupported(_))));
    }

    #[test]
    fn corrupted_schedule_fails_verification() {
        let p = bench();
        let d = FiniteDisturbance::new(vec![-1.0, 0.0, 1.0], 1.0).unwrap();
        let g = Grid2::uniform((-3.0, 3.0), 13, (-3.0, 20.0), 24, (-3.0, 3.0), 31).unwrap();
        let vg = robust_value_iteration(&p, &d, &g).unwrap();
        let mut sched = acvar_recursion(&p, &Mat::from_element(1, 1, 1.0)).unwrap();
        assert!(verify_upper_bound(&vg, &sched).passed);
        sched.a[0] = -1.0;
        let report = verify_upper_bound(&vg, &sched);
        assert!(!report.passed);
        assert!(report.max_violation > 0.0);
    }

    #[test]
    fn csv_has_expected_columns() {
        let p = LqProblem::scalar(1.0, 1.0, 1e-3, 1.0, 1.0, 1.0, 1).unwrap();
        let d = FiniteDisturbance::new(vec![-1.0, 1.0], 1.0).unwrap();
        let g = Grid2::uniform((-1.0, 1.0), 3, (0.0, 1.0), 2, (-1.0, 1.0), 3).unwrap();
        let vg = robust_value_iteration(&p, &d, &g).unwrap();
        let text = vg.to_csv_string().unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x,s,value,u_star"));
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 2);
        assert!(text.lines().last().unwrap().ends_with(','));
    }
}
