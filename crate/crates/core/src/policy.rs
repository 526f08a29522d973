//! State-feedback policies on the augmented state `(x, s)`, the block
//! matrices behind the LMI certificate of the CVaR controller, and the
//! closed-form bound on the optimal CVaR.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, Mat, Vector};
use crate::model::{LqProblem, ModelError};
use crate::riccati::{self, AcvarSchedule};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("M11 - G~ is not positive definite")]
    InnerMatrixNotPD,
    #[error("numerical conditioning failure: {0}")]
    Conditioning(&'static str),
    #[error("LMI certificate failed at t = {t}: min eigenvalue {min_eig:e} below -{tolerance:e}")]
    CertificateFailed { t: usize, min_eig: f64, tolerance: f64 },
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("time index {t} outside 0..{horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `G̃ = P − PB(R + BᵀPB)⁻¹BᵀP`, satisfying `0 ≺ G̃ ⪯ P`.
pub fn g_tilde(p_next: &Mat, problem: &LqProblem) -> Result<Mat, PolicyError> {
    riccati::completed_square(problem, p_next)
        .map(|(g, _)| g)
        .ok_or(PolicyError::Conditioning("P_{t+1} or R + B'PB is singular"))
}

/// `ĥ(x, s, M11) = xᵀ(Aᵀ(G̃⁻¹ − M11⁻¹)⁻¹A + Q)x − s`.
///
/// Evaluated through `(G̃⁻¹ − M11⁻¹)⁻¹ = G̃ + G̃(M11 − G̃)⁻¹G̃`, which needs no
/// inverse of `G̃` (singular along directions the controls cancel).
pub fn h_hat(x: &Vector, s: f64, m11: &Mat, p_next: &Mat, problem: &LqProblem) -> Result<f64, PolicyError> {
    check_state(x, problem)?;
    let n = problem.n();
    if m11.shape() != (n, n) {
        return Err(PolicyError::DimensionMismatch(format!("M11 must be {n}x{n}")));
    }
    let gt = g_tilde(p_next, problem)?;
    let chol = linalg::cholesky(&(m11 - &gt)).ok_or(PolicyError::InnerMatrixNotPD)?;
    let ax = &problem.a * x;
    let gax = &gt * &ax;
    Ok(ax.dot(&gax) + gax.dot(&chol.solve(&gax)) + linalg::quad_form(&problem.q, x) - s)
}

/// Schur-complement form with a general off-diagonal block `M12`:
/// `h = xᵀ(AᵀG̃A + Q)x − s + (M12 − G̃Ax)ᵀ(M11 − G̃)⁻¹(M12 − G̃Ax)`.
pub fn h_schur(x: &Vector, s: f64, m: &Mat, p_next: &Mat, problem: &LqProblem) -> Result<f64, PolicyError> {
    check_state(x, problem)?;
    let n = problem.n();
    check_m(m, n)?;
    let gt = g_tilde(p_next, problem)?;
    let m11 = m.view((0, 0), (n, n)).into_owned();
    let m12 = m.view((0, n), (n, 1)).column(0).into_owned();
    let gax = &gt * (&problem.a * x);
    let r = m12 - &gax;
    let chol = linalg::cholesky(&(m11 - &gt)).ok_or(PolicyError::InnerMatrixNotPD)?;
    let base = linalg::quad_form(&(problem.a.transpose() * &gt * &problem.a + &problem.q), x) - s;
    Ok(base + r.dot(&chol.solve(&r)))
}

/// `H_{x,s} = [[G̃, G̃Ax], [xᵀAᵀG̃, xᵀ(AᵀG̃A + Q)x − s]]`.
pub fn h_xs(x: &Vector, s: f64, p_next: &Mat, problem: &LqProblem) -> Result<Mat, PolicyError> {
    check_state(x, problem)?;
    let n = problem.n();
    let gt = g_tilde(p_next, problem)?;
    let gax = &gt * (&problem.a * x);
    let corner = linalg::quad_form(&(problem.a.transpose() * &gt * &problem.a + &problem.q), x) - s;
    let mut h = Mat::zeros(n + 1, n + 1);
    h.view_mut((0, 0), (n, n)).copy_from(&gt);
    h.view_mut((0, n), (n, 1)).copy_from(&gax);
    h.view_mut((n, 0), (1, n)).copy_from(&gax.transpose());
    h[(n, n)] = corner;
    Ok(h)
}

/// `H = [[P, P[A B]], [[A B]ᵀP, [A B]ᵀP[A B] + diag(Q, R)]]`, size `2n+m`.
pub fn stacked_cost_matrix(p_next: &Mat, problem: &LqProblem) -> Mat {
    let n = problem.n();
    let m = problem.m();
    let mut ab = Mat::zeros(n, n + m);
    ab.view_mut((0, 0), (n, n)).copy_from(&problem.a);
    ab.view_mut((0, n), (n, m)).copy_from(&problem.b);
    let p_ab = p_next * &ab;
    let mut lower = ab.transpose() * &p_ab;
    {
        let mut block = lower.view_mut((0, 0), (n, n));
        block += &problem.q;
    }
    {
        let mut block = lower.view_mut((n, n), (m, m));
        block += &problem.r;
    }

    let size = 2 * n + m;
    let mut h = Mat::zeros(size, size);
    h.view_mut((0, 0), (n, n)).copy_from(p_next);
    h.view_mut((0, n), (n, n + m)).copy_from(&p_ab);
    h.view_mut((n, 0), (n + m, n)).copy_from(&p_ab.transpose());
    h.view_mut((n, n), (n + m, n + m)).copy_from(&lower);
    linalg::symmetrize(&h)
}

/// The `u`-free block matrix `Φ = [[M − G_s, Kᵀ], [K, H⁻¹]]` of size
/// `3n + m + 1` for a full `(n+1)×(n+1)` multiplier `M`.
pub fn phi_matrix(x: &Vector, s: f64, m: &Mat, p_next: &Mat, problem: &LqProblem) -> Result<Mat, PolicyError> {
    check_state(x, problem)?;
    let n = problem.n();
    let mc = problem.m();
    check_m(m, n)?;
    let h = stacked_cost_matrix(p_next, problem);
    let h_inv = linalg::spd_inverse(&h).ok_or(PolicyError::Conditioning("H is not positive definite"))?;

    let lead = n + 1;
    let size = 3 * n + mc + 1;
    let mut phi = Mat::zeros(size, size);
    let mut top = linalg::symmetrize(m);
    top[(n, n)] += s;
    phi.view_mut((0, 0), (lead, lead)).copy_from(&top);

    // K^x = [[I_n, 0], [0, [x; 0_m]]]
    let mut kx = Mat::zeros(2 * n + mc, lead);
    kx.view_mut((0, 0), (n, n)).fill_with_identity();
    kx.view_mut((n, n), (n, 1)).copy_from(x);
    phi.view_mut((lead, 0), (2 * n + mc, lead)).copy_from(&kx);
    phi.view_mut((0, lead), (lead, 2 * n + mc)).copy_from(&kx.transpose());
    phi.view_mut((lead, lead), (2 * n + mc, 2 * n + mc)).copy_from(&h_inv);
    Ok(phi)
}

/// `Φ + Q̄ᵀuP̄ + (Q̄ᵀuP̄)ᵀ` with `M = diag(M11, M22)`: the control enters the
/// last `m` rows of the budget column (index `n`) and the mirrored entries.
#[allow(clippy::too_many_arguments)]
pub fn assemble_lmi(
    x: &Vector,
    s: f64,
    u: &Vector,
    m11: &Mat,
    m22: f64,
    p_next: &Mat,
    problem: &LqProblem,
) -> Result<Mat, PolicyError> {
    let n = problem.n();
    let mc = problem.m();
    if u.len() != mc || m11.nrows() != n || m11.ncols() != n {
        return Err(PolicyError::DimensionMismatch("u or M11 has the wrong shape".into()));
    }
    let mut m = Mat::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(m11);
    m[(n, n)] = m22;
    let mut lmi = phi_matrix(x, s, &m, p_next, problem)?;
    add_control_coupling(&mut lmi, u, n);
    Ok(lmi)
}

fn add_control_coupling(lmi: &mut Mat, u: &Vector, n: usize) {
    let first = 3 * n + 1;
    for (i, ui) in u.iter().enumerate() {
        lmi[(first + i, n)] += ui;
        lmi[(n, first + i)] += ui;
    }
}

/// `W_P̄ᵀ Φ W_P̄`: drops the budget coordinate (index `n`).
pub fn project_out_budget(phi: &Mat, n: usize) -> Mat {
    phi.clone().remove_row(n).remove_column(n)
}

/// `W_Q̄ᵀ Φ W_Q̄`: drops the trailing `m` control coordinates.
pub fn project_out_controls(phi: &Mat, m: usize) -> Mat {
    let keep = phi.nrows() - m;
    phi.view((0, 0), (keep, keep)).into_owned()
}

/// Numerical witness that a control satisfies the synthesis LMI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmiCertificate {
    pub t: usize,
    pub x: Vec<f64>,
    pub s: f64,
    pub u: Vec<f64>,
    #[serde(skip)]
    pub m11: Mat,
    pub m22: f64,
    pub min_eig: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl LmiCertificate {
    /// Audit-log record `{t, x, s, u, min_eig, passed}`.
    pub fn audit_record(&self) -> serde_json::Value {
        serde_json::json!({
            "t": self.t,
            "x": self.x,
            "s": self.s,
            "u": self.u,
            "min_eig": self.min_eig,
            "passed": self.passed,
        })
    }
}

/// Relative inflation of `M22*` that restores strict feasibility.
pub const M22_SLACK: f64 = 1e-7;
/// Relative eigenvalue tolerance of the certificate.
pub const LMI_TOLERANCE: f64 = 1e-9;

fn check_time(t: usize, schedule: &AcvarSchedule) -> Result<(), PolicyError> {
    let horizon = schedule.horizon();
    if t >= horizon {
        return Err(PolicyError::TimeOutOfRange { t, horizon });
    }
    Ok(())
}

/// Certifies an arbitrary control `u` at `(x, s, t)` against
/// `M* = diag(P_{t+1} + L, max(ĥ, 0) + δ)`.
pub fn certify_control(
    x: &Vector,
    s: f64,
    t: usize,
    u: &Vector,
    schedule: &AcvarSchedule,
    problem: &LqProblem,
) -> Result<LmiCertificate, PolicyError> {
    check_time(t, schedule)?;
    let p_next = &schedule.p[t + 1];
    let m11 = p_next + &schedule.l;
    let h = h_hat(x, s, &m11, p_next, problem)?;
    let m22 = h.max(0.0) + M22_SLACK * h.abs().max(1.0);

    let n = problem.n();
    let mut m = Mat::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&m11);
    m[(n, n)] = m22;
    let phi = phi_matrix(x, s, &m, p_next, problem)?;
    let tolerance = LMI_TOLERANCE * (1.0 + phi.norm());
    let mut lmi = phi;
    add_control_coupling(&mut lmi, u, n);
    let min_eig = linalg::min_eigenvalue(&lmi);
    Ok(LmiCertificate {
        t,
        x: x.iter().copied().collect(),
        s,
        u: u.iter().copied().collect(),
        m11,
        m22,
        min_eig,
        tolerance,
        passed: min_eig >= -tolerance,
    })
}

/// The synthesized CVaR control `u = K_t x` together with its certificate.
pub fn synthesize_acvar_control(
    x: &Vector,
    s: f64,
    t: usize,
    schedule: &AcvarSchedule,
    problem: &LqProblem,
) -> Result<(Vector, LmiCertificate), PolicyError> {
    check_time(t, schedule)?;
    check_state(x, problem)?;
    let u = &schedule.k[t] * x;
    let cert = certify_control(x, s, t, &u, schedule, problem)?;
    if !cert.passed {
        return Err(PolicyError::CertificateFailed { t, min_eig: cert.min_eig, tolerance: cert.tolerance });
    }
    Ok((u, cert))
}

/// Control tables over a scalar `(x, s)` grid; lookup is by nearest node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPolicy {
    pub x_nodes: Vec<f64>,
    pub s_nodes: Vec<f64>,
    /// `tables[t][(i, j)]` is the control at `(x_nodes[i], s_nodes[j])`.
    pub tables: Vec<Mat>,
}

pub(crate) fn nearest_index(nodes: &[f64], v: f64) -> usize {
    match nodes.binary_search_by(|probe| probe.total_cmp(&v)) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i >= nodes.len() => nodes.len() - 1,
        Err(i) => {
            if v - nodes[i - 1] <= nodes[i] - v {
                i - 1
            } else {
                i
            }
        }
    }
}

impl GridPolicy {
    pub fn control(&self, x: f64, s: f64, t: usize) -> f64 {
        let i = nearest_index(&self.x_nodes, x);
        let j = nearest_index(&self.s_nodes, s);
        self.tables[t][(i, j)]
    }
}

/// Deterministic policies on the augmented state.
#[derive(Debug, Clone)]
pub enum Policy {
    Zero,
    /// `u_t = K_t x_t`.
    LinearFeedback { gains: Vec<Mat> },
    /// `u_t = K_t x_t` from the CVaR schedule, optionally certified each step.
    AcvarCertified { schedule: AcvarSchedule, certify: bool },
    Grid(GridPolicy),
}

/// One transition of the augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub x_next: Vector,
    pub s_next: f64,
    pub u: Vector,
    pub cost: f64,
    pub certificate: Option<LmiCertificate>,
}

impl Policy {
    pub fn acvar(schedule: AcvarSchedule) -> Self {
        Policy::AcvarCertified { schedule, certify: true }
    }

    pub fn with_certification(self, on: bool) -> Self {
        match self {
            Policy::AcvarCertified { schedule, .. } => Policy::AcvarCertified { schedule, certify: on },
            other => other,
        }
    }

    /// Control at `(x, s, t)`, plus a certificate when one was computed.
    pub fn control(
        &self,
        problem: &LqProblem,
        x: &Vector,
        s: f64,
        t: usize,
    ) -> Result<(Vector, Option<LmiCertificate>), PolicyError> {
        check_state(x, problem)?;
        match self {
            Policy::Zero => Ok((Vector::zeros(problem.m()), None)),
            Policy::LinearFeedback { gains } => {
                let k = gains.get(t).ok_or(PolicyError::TimeOutOfRange { t, horizon: gains.len() })?;
                if k.nrows() != problem.m() || k.ncols() != problem.n() {
                    return Err(PolicyError::DimensionMismatch("gain shape".into()));
                }
                Ok((k * x, None))
            }
            Policy::AcvarCertified { schedule, certify } => {
                if *certify {
                    let (u, cert) = synthesize_acvar_control(x, s, t, schedule, problem)?;
                    Ok((u, Some(cert)))
                } else {
                    check_time(t, schedule)?;
                    Ok((&schedule.k[t] * x, None))
                }
            }
            Policy::Grid(grid) => {
                if !problem.is_scalar() {
                    return Err(PolicyError::DimensionMismatch("grid policies are scalar".into()));
                }
                if t >= grid.tables.len() {
                    return Err(PolicyError::TimeOutOfRange { t, horizon: grid.tables.len() });
                }
                Ok((Vector::from_element(1, grid.control(x[0], s, t)), None))
            }
        }
    }
}

/// Applies the policy, the dynamics and the budget update for one step.
pub fn rollout_step(
    policy: &Policy,
    x: &Vector,
    s: f64,
    t: usize,
    w: &Vector,
    problem: &LqProblem,
) -> Result<Step, PolicyError> {
    if w.len() != problem.n() {
        return Err(PolicyError::DimensionMismatch("disturbance dimension".into()));
    }
    let (u, certificate) = policy.control(problem, x, s, t)?;
    let cost = problem.stage_cost(x, &u)?;
    let x_next = problem.step(x, &u, w);
    Ok(Step { x_next, s_next: s - cost, u, cost, certificate })
}

/// `s_0 = x_0ᵀ P_0 x_0`.
pub fn initial_budget(x0: &Vector, schedule: &AcvarSchedule) -> f64 {
    linalg::quad_form(&schedule.p[0], x0)
}

/// `inf_s s + (a_0 + max(x0ᵀP_0x0 − s, 0))/α = x0ᵀP_0x0 + a_0/α`.
pub fn upper_bound_j(x0: &Vector, alpha: f64, schedule: &AcvarSchedule) -> Result<f64, PolicyError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(PolicyError::BadAlpha(alpha));
    }
    Ok(initial_budget(x0, schedule) + schedule.a[0] / alpha)
}

fn check_state(x: &Vector, problem: &LqProblem) -> Result<(), PolicyError> {
    if x.len() != problem.n() {
        return Err(PolicyError::DimensionMismatch(format!(
            "state has length {}, expected {}",
            x.len(),
            problem.n()
        )));
    }
    Ok(())
}

fn check_m(m: &Mat, n: usize) -> Result<(), PolicyError> {
    if m.nrows() != n + 1 || m.ncols() != n + 1 {
        return Err(PolicyError::DimensionMismatch(format!("M must be {0}x{0}", n + 1)));
    }
    Ok(())
}
