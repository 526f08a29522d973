#![allow(dead_code)]

use acvar_core::linalg::{max_eigenvalue, symmetrize, Mat, Vector};
use acvar_core::LqProblem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vector {
    Vector::from_fn(len, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// `GGᵀ/n + floor·I`, eigenvalues in roughly `[floor, floor + n]`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Mat {
    let g = uniform_mat(rng, n, n);
    symmetrize(&(&g * g.transpose() / n as f64 + Mat::identity(n, n) * floor))
}

/// A validated instance with `n ≤ max_n`, `m ≤ max_m`, `1 ≤ N ≤ max_horizon`.
pub fn random_problem_with(rng: &mut ChaCha8Rng, max_n: usize, max_m: usize, max_horizon: usize) -> LqProblem {
    let n = rng.random_range(1..=max_n);
    let m = rng.random_range(1..=max_m);
    let horizon = rng.random_range(1..=max_horizon);
    let radius = rng.random_range(0.3..1.05);
    let a = with_spectral_radius(uniform_mat(rng, n, n), radius);
    let b = uniform_mat(rng, n, m);
    let spd = |rng: &mut ChaCha8Rng, dim: usize| {
        let floor = rng.random_range(0.05..1.0);
        random_spd(rng, dim, floor)
    };
    let q = spd(rng, n);
    let r = spd(rng, m);
    let qf = spd(rng, n);
    let noise_scale = rng.random_range(0.1..2.0);
    let sigma = spd(rng, n) * noise_scale;
    LqProblem::new(a, b, q, r, qf, sigma, horizon).expect("generated problem is valid")
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> LqProblem {
    random_problem_with(rng, 6, 4, 20)
}

/// Rescales `a` so its largest eigenvalue modulus equals `radius`.
pub fn with_spectral_radius(a: Mat, radius: f64) -> Mat {
    let current = a.complex_eigenvalues().iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    if current < 1e-8 {
        return a;
    }
    a * (radius / current)
}

/// Same as [`random_problem`] but with `R = I`, for the LQ game.
pub fn random_problem_unit_r(rng: &mut ChaCha8Rng) -> LqProblem {
    let mut p = random_problem(rng);
    p.r = Mat::identity(p.m(), p.m());
    p
}

/// Random symmetric positive definite `L` with log-uniform scale in `[lo, hi]`.
pub fn random_l(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Mat {
    let scale = rng.random_range(lo.ln()..hi.ln()).exp();
    random_spd(rng, n, 0.2) * scale
}

/// `L` sized against the problem: `κ·λ_max(P_0^LQR)` times a random SPD
/// shape, `κ` log-uniform in `[lo, hi]`.
///
/// For `L` small against `P` the exact recursion grows like `P²/L` per step
/// and leaves the range of f64 within a few steps. `κ` is doubled until
/// the recursion run with the LQR gains held fixed, a Loewner upper bound
/// on the optimized one, stays below `1e3·λ_max(P_0^LQR)`.
pub fn random_relative_l(rng: &mut ChaCha8Rng, problem: &LqProblem, lo: f64, hi: f64) -> Mat {
    let lqr = acvar_core::lqr_recursion(problem).expect("lqr");
    let scale = max_eigenvalue(&lqr.p[0]);
    let mut l = random_l(rng, problem.n(), lo, hi) * scale;
    while fixed_gain_bound(problem, &lqr.k, &l) > 1e3 * scale {
        l *= 2.0;
    }
    l
}

/// `λ_max(P_0)` of the upper-bound recursion with the gains `k` fixed.
pub fn fixed_gain_bound(problem: &LqProblem, k: &[Mat], l: &Mat) -> f64 {
    let l_inv = l.clone().try_inverse().expect("L is invertible");
    let mut p = problem.qf.clone();
    for t in (0..problem.horizon).rev() {
        let s = &p + &p * &l_inv * &p;
        let acl = &problem.a + &problem.b * &k[t];
        p = symmetrize(&(&problem.q + k[t].transpose() * &problem.r * &k[t] + acl.transpose() * s * &acl));
        if !p.iter().all(|v| v.is_finite() && v.abs() < 1e200) {
            return f64::INFINITY;
        }
    }
    max_eigenvalue(&p)
}

pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / (1.0 + b.norm())
}

/// A moment-polytope LP on `k ≤ 6` scalar support points with a random
/// objective. Support points alternate in sign, so infeasibility comes
/// mostly from a second-moment budget below what a zero-mean law needs.
pub fn random_moment_lp(rng: &mut ChaCha8Rng) -> acvar_core::LpInstance {
    let k = rng.random_range(1..=6);
    let points: Vec<f64> = (0..k)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * rng.random_range(0.0..3.0))
        .collect();
    let sigma2 = rng.random_range(0.05..4.0);
    let mut lp = acvar_core::lp::scalar_moment_polytope(&points, sigma2);
    lp.c = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    lp
}

/// A bounded LP with `k ≤ 6` variables: the simplex `Σp = 1` intersected
/// with up to three random `≤` rows and optionally one extra equality.
pub fn random_simplex_lp(rng: &mut ChaCha8Rng) -> acvar_core::LpInstance {
    let k = rng.random_range(1..=6);
    let row = |rng: &mut ChaCha8Rng| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut eq_rows = vec![vec![1.0; k]];
    let mut eq_rhs = vec![1.0];
    if rng.random_bool(0.3) {
        eq_rows.push(row(rng));
        eq_rhs.push(rng.random_range(-0.3..0.3));
    }
    let n_ineq = rng.random_range(0..=3);
    let ineq_rows: Vec<Vec<f64>> = (0..n_ineq).map(|_| row(rng)).collect();
    let ineq_rhs = (0..n_ineq).map(|_| rng.random_range(-0.2..0.8)).collect();
    acvar_core::LpInstance { c: row(rng), eq_rows, eq_rhs, ineq_rows, ineq_rhs }
}

/// Compares `solve_max` with the best enumerated vertex. Returns the
/// absolute value gap, or `None` if exactly one side reports infeasibility.
pub fn lp_oracle_gap(lp: &acvar_core::LpInstance) -> Option<f64> {
    let vertices = acvar_core::enumerate_vertices(lp).expect("small instance");
    let best = vertices.iter().map(|v| lp.objective(v)).fold(f64::NEG_INFINITY, f64::max);
    match acvar_core::solve_max(lp) {
        Ok(sol) if !vertices.is_empty() => {
            let feasible = lp.max_violation(&sol.p) <= 1e-10;
            feasible.then_some((sol.value - best).abs().max((lp.objective(&sol.p) - sol.value).abs()))
        }
        Err(acvar_core::LpError::Infeasible) if vertices.is_empty() => Some(0.0),
        _ => None,
    }
}

/// A random ACVaR instance with a time step and an augmented state.
pub struct SynthesisCase {
    pub problem: LqProblem,
    pub schedule: acvar_core::AcvarSchedule,
    pub t: usize,
    pub x: Vector,
    pub s: f64,
}

pub fn synthesis_case(rng: &mut ChaCha8Rng) -> SynthesisCase {
    let problem = random_problem(rng);
    let l = random_relative_l(rng, &problem, 0.2, 100.0);
    let schedule = acvar_core::acvar_recursion(&problem, &l).expect("acvar recursion");
    let t = rng.random_range(0..problem.horizon);
    let x = uniform_vec(rng, problem.n(), 3.0);
    let value = acvar_core::linalg::quad_form(&schedule.p[t], &x);
    // Budgets on both sides of the value, where max(ĥ, 0) switches branch.
    let s = rng.random_range(-0.5..1.5) * value + rng.random_range(-2.0..2.0);
    SynthesisCase { problem, schedule, t, x, s }
}

/// Worst relative errors of the closed-form identities on one case.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityErrors {
    /// `xᵀP_tx` against the closed-loop form with `S_{t+1}` (ACVaR).
    pub acvar_gain: f64,
    /// `xᵀP̄_tx` against the closed-loop form with `P̃` (LEQR at `γ_c/2`).
    pub leqr_gain: f64,
    /// `ĥ(x, s, P_{t+1}+L)` against `xᵀP_tx − s`.
    pub h_hat: f64,
    /// Schur form with `M12 = 0` against `xᵀAᵀ(G̃⁻¹ − M11⁻¹)⁻¹Ax + xᵀQx − s`.
    pub schur: f64,
}

impl IdentityErrors {
    pub fn max(self, other: Self) -> Self {
        Self {
            acvar_gain: self.acvar_gain.max(other.acvar_gain),
            leqr_gain: self.leqr_gain.max(other.leqr_gain),
            h_hat: self.h_hat.max(other.h_hat),
            schur: self.schur.max(other.schur),
        }
    }

    pub fn worst(self) -> f64 {
        self.acvar_gain.max(self.leqr_gain).max(self.h_hat).max(self.schur)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

/// Evaluates every identity on `case` at `x` and `s`.
pub fn identity_errors(case: &SynthesisCase, leqr: Option<&acvar_core::LeqrSchedule>) -> IdentityErrors {
    use acvar_core::linalg::{quad_form, spd_inverse};
    use acvar_core::policy::{g_tilde, h_hat, h_schur};
    let SynthesisCase { problem, schedule, t, x, s } = case;
    let (t, s) = (*t, *s);
    let closed_loop = |k: &Mat, m: &Mat| {
        let acl = &problem.a + &problem.b * k;
        &problem.q + k.transpose() * &problem.r * k + acl.transpose() * m * &acl
    };
    let value = quad_form(&schedule.p[t], x);
    let acvar_gain = rel(quad_form(&closed_loop(&schedule.k[t], &schedule.s[t]), x), value);
    let leqr_gain = leqr.map_or(0.0, |sched| {
        let pbar = sched.pbar[t].as_ref().expect("feasible");
        let rebuilt = closed_loop(sched.k[t].as_ref().unwrap(), sched.ptilde[t].as_ref().unwrap());
        rel(quad_form(&rebuilt, x), quad_form(pbar, x))
    });

    let p_next = &schedule.p[t + 1];
    let m11 = p_next + &schedule.l;
    let h = h_hat(x, s, &m11, p_next, problem).expect("h_hat");
    let h_hat_err = rel(h, value - s);

    let n = problem.n();
    let mut m = Mat::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&m11);
    let schur = h_schur(x, s, &m, p_next, problem).expect("h_schur");
    let gt = g_tilde(p_next, problem).expect("g_tilde");
    let literal = spd_inverse(&(spd_inverse(&gt).unwrap() - spd_inverse(&m11).unwrap())).unwrap();
    let ax = &problem.a * x;
    let reference = quad_form(&literal, &ax) + quad_form(&problem.q, x) - s;
    IdentityErrors { acvar_gain, leqr_gain, h_hat: h_hat_err, schur: rel(schur, reference) }
}

/// Nullspace equivalences on one case, each checked in both directions
/// with a clear margin. Returns a description of the first disagreement.
pub fn nullspace_equivalences(case: &SynthesisCase, rng: &mut ChaCha8Rng) -> Result<(), String> {
    use acvar_core::linalg::is_positive_definite;
    use acvar_core::policy::{h_xs, phi_matrix, project_out_budget, project_out_controls};
    let SynthesisCase { problem, schedule, t, x, s } = case;
    let (n, m) = (problem.n(), problem.m());
    let p_next = &schedule.p[*t + 1];
    let scale = p_next.norm();
    let embed = |m11: &Mat, m22: f64| {
        let mut full = Mat::zeros(n + 1, n + 1);
        full.view_mut((0, 0), (n, n)).copy_from(m11);
        full[(n, n)] = m22;
        full
    };
    let margin = random_spd(rng, n, 0.2) * (0.1 * scale);
    let v = uniform_vec(rng, n, 1.0).normalize();
    let indefinite = &margin - &v * v.transpose() * (2.0 * margin.norm());
    for (m11, expect) in [(p_next + &margin, true), (p_next + &indefinite, false)] {
        let phi = phi_matrix(x, *s, &embed(&m11, 1.0), p_next, problem).map_err(|e| e.to_string())?;
        let got = is_positive_definite(&project_out_budget(&phi, n));
        if got != expect {
            return Err(format!("budget projection: expected {expect}, got {got}"));
        }
    }

    let h = h_xs(x, *s, p_next, problem).map_err(|e| e.to_string())?;
    let hscale = h.norm();
    let margin = random_spd(rng, n + 1, 0.2) * (0.1 * hscale);
    let w = uniform_vec(rng, n + 1, 1.0).normalize();
    let indefinite = &margin - &w * w.transpose() * (2.0 * margin.norm());
    for (full, expect) in [(&h + &margin, true), (&h + &indefinite, false)] {
        let phi = phi_matrix(x, *s, &full, p_next, problem).map_err(|e| e.to_string())?;
        let got = is_positive_definite(&project_out_controls(&phi, m));
        if got != expect {
            return Err(format!("control projection: expected {expect}, got {got}"));
        }
    }
    Ok(())
}

/// A tiny integer instance for the brute-force DP oracle: integer system
/// data, horizon 2, support `{−a1, 0, a2}`, integer lattice grids. Every
/// successor lands on a lattice point, so interpolation is exact there.
pub struct TinyDp {
    pub problem: LqProblem,
    pub dist: acvar_core::FiniteDisturbance,
    pub grids: acvar_core::Grid2,
}

pub fn tiny_dp_instance(rng: &mut ChaCha8Rng) -> TinyDp {
    let int = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| f64::from(rng.random_range(lo..=hi));
    let a = int(rng, -2, 2);
    let b = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * int(rng, 1, 2);
    let (q, r, qf) = (int(rng, 1, 2), int(rng, 1, 2), int(rng, 1, 2));
    let sigma2 = int(rng, 1, 4);
    let one = |v: f64| Mat::from_element(1, 1, v);
    let problem = LqProblem::new(one(a), one(b), one(q), one(r), one(qf), one(sigma2), 2).expect("valid");
    let support = vec![-int(rng, 1, 2), 0.0, int(rng, 1, 2)];
    let dist = acvar_core::FiniteDisturbance::new(support, sigma2).expect("zero is in the support");
    let s0 = int(rng, -4, 0);
    let lattice = |lo: f64, count: usize| (0..count).map(|i| lo + i as f64).collect::<Vec<_>>();
    let grids = acvar_core::Grid2::new(lattice(-4.0, 9), lattice(s0, 9), lattice(-4.0, 9)).expect("grid");
    TinyDp { problem, dist, grids }
}

/// Value tables of the tiny instance by exhaustive search, with the LP
/// solved by vertex enumeration. Off-grid successors follow the documented
/// extension: slope −1 below the budget range, constant above it, and
/// `V(x_b, s) + Qf·(x² − x_b²)` beyond the state range.
pub fn tiny_dp_brute_force(inst: &TinyDp) -> Vec<Mat> {
    let p = &inst.problem;
    let (a, b, q, r, qf) = (p.a[(0, 0)], p.b[(0, 0)], p.q[(0, 0)], p.r[(0, 0)], p.qf[(0, 0)]);
    let g = &inst.grids;
    let vertices = acvar_core::enumerate_vertices(&inst.dist.polytope()).expect("tiny LP");
    let worst_case = |values: &[f64]| {
        vertices
            .iter()
            .map(|v| v.iter().zip(values).map(|(p, c)| p * c).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let node = |nodes: &[f64], v: f64| nodes.iter().position(|n| *n == v);
    let extend = |table: &Mat, x: f64, s: f64| -> f64 {
        let (xs, ss) = (&g.x_nodes, &g.s_nodes);
        let xb = x.clamp(xs[0], xs[xs.len() - 1]);
        let i = node(xs, xb).expect("integer state on the lattice");
        let sb = s.clamp(ss[0], ss[ss.len() - 1]);
        let j = node(ss, sb).expect("integer budget on the lattice");
        let below = (ss[0] - s).max(0.0);
        table[(i, j)] + below + qf * (x * x - xb * xb)
    };
    let terminal = |x: f64, s: f64| (qf * x * x - s).max(0.0);
    let stage = |next: &dyn Fn(f64, f64) -> f64| {
        Mat::from_fn(g.x_nodes.len(), g.s_nodes.len(), |i, j| {
            let (x, s) = (g.x_nodes[i], g.s_nodes[j]);
            g.u_nodes
                .iter()
                .map(|&u| {
                    let succ: Vec<f64> =
                        inst.dist.points.iter().map(|w| next(a * x + b * u + w, s - q * x * x - r * u * u)).collect();
                    worst_case(&succ)
                })
                .fold(f64::INFINITY, f64::min)
        })
    };
    let v1 = stage(&terminal);
    let v0 = stage(&|x, s| extend(&v1, x, s));
    let v2 = Mat::from_fn(g.x_nodes.len(), g.s_nodes.len(), |i, j| terminal(g.x_nodes[i], g.s_nodes[j]));
    vec![v0, v1, v2]
}
