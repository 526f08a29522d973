//! Backward Riccati recursions: the CVaR upper-bound recursion parameterized
//! by a positive definite matrix `L`, the exponential-utility (LEQR)
//! recursion, the soft-constrained LQ game, and plain LQR.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, serde_rows, Mat};
use crate::model::LqProblem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("numerical conditioning failure at t = {t}: {what}")]
    Conditioning { t: usize, what: &'static str },
    #[error("parameter {name} must be positive, got {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("the LQ game recursion requires R = I")]
    RNotIdentity,
    #[error("no feasible gamma: the LEQR recursion fails even at gamma = 1e-12")]
    NoFeasibleGamma,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Completes the square of `uᵀRu + (Ax+Bu)ᵀ M (Ax+Bu)` in `u`.
///
/// Returns `G̃ = M − MB(R + BᵀMB)⁻¹BᵀM` and the minimizing gain
/// `K = −(R + BᵀMB)⁻¹BᵀMA`, so that the minimum equals `xᵀAᵀG̃Ax`.
/// Both are evaluated in the equivalent information form
/// `G̃ = (M⁻¹ + BR⁻¹Bᵀ)⁻¹`, `K = −R⁻¹BᵀG̃A`, which does not cancel when
/// `BᵀMB` dwarfs `R`. `M` must be positive definite.
pub fn completed_square(problem: &LqProblem, m: &Mat) -> Option<(Mat, Mat)> {
    let r_inv = linalg::spd_inverse(&problem.r)?;
    completed_square_info(problem, &r_inv, &linalg::spd_inverse(m)?)
}

/// [`completed_square`] given `R⁻¹` and `M⁻¹`.
fn completed_square_info(problem: &LqProblem, r_inv: &Mat, m_inv: &Mat) -> Option<(Mat, Mat)> {
    let b = &problem.b;
    let gtilde = linalg::spd_inverse(&(m_inv + b * r_inv * b.transpose()))?;
    let gain = -(r_inv * b.transpose() * &gtilde * &problem.a);
    Some((gtilde, gain))
}

fn value_update(problem: &LqProblem, gtilde: &Mat) -> Mat {
    linalg::symmetrize(&(problem.a.transpose() * gtilde * &problem.a + &problem.q))
}

/// Output of [`acvar_recursion`]; vectors are indexed by time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcvarSchedule {
    #[serde(rename = "L", with = "serde_rows")]
    pub l: Mat,
    /// `P_0 … P_N`.
    #[serde(rename = "P", with = "serde_rows::vec")]
    pub p: Vec<Mat>,
    /// `a_0 … a_N`.
    pub a: Vec<f64>,
    /// `s[t] = S_{t+1} = (P_{t+1}⁻¹ − (P_{t+1}+L)⁻¹)⁻¹` for `t = 0 … N−1`.
    #[serde(rename = "S", with = "serde_rows::vec")]
    pub s: Vec<Mat>,
    /// `k[t] = −(R + BᵀS_{t+1}B)⁻¹BᵀS_{t+1}A`.
    #[serde(rename = "K", with = "serde_rows::vec")]
    pub k: Vec<Mat>,
}

impl AcvarSchedule {
    pub fn horizon(&self) -> usize {
        self.p.len() - 1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// CVaR upper-bound recursion
/// `P_t = Aᵀ(P_{t+1}⁻¹ + BR⁻¹Bᵀ − (P_{t+1}+L)⁻¹)⁻¹A + Q`,
/// `a_t = a_{t+1} + tr(Σ(P_{t+1}+L))`, from `P_N = Qf`, `a_N = 0`.
///
/// Evaluated through `S = P + P L⁻¹ P` (equal to `(P⁻¹ − (P+L)⁻¹)⁻¹`) and a
/// completed square in `S`, which avoids the cancellation in
/// `P⁻¹ − (P+L)⁻¹` when `L` is large.
pub fn acvar_recursion(problem: &LqProblem, l: &Mat) -> Result<AcvarSchedule, RiccatiError> {
    let n = problem.n();
    if l.nrows() != n || l.ncols() != n {
        return Err(RiccatiError::DimensionMismatch(format!("L must be {n}x{n}")));
    }
    if (l - l.transpose()).amax() > 1e-12 * l.amax().max(1.0) {
        return Err(RiccatiError::NotPositiveDefinite("L"));
    }
    let l_chol = linalg::cholesky(l).ok_or(RiccatiError::NotPositiveDefinite("L"))?;
    let l = linalg::symmetrize(l);
    let horizon = problem.horizon;

    let mut p = vec![Mat::zeros(n, n); horizon + 1];
    let mut a = vec![0.0; horizon + 1];
    let mut s = vec![Mat::zeros(n, n); horizon];
    let mut k = vec![Mat::zeros(problem.m(), n); horizon];
    p[horizon] = problem.qf.clone();

    for t in (0..horizon).rev() {
        let p_next = &p[t + 1];
        let s_next = linalg::symmetrize(&(p_next + p_next * l_chol.solve(p_next)));
        // S ⪰ P ≻ 0 holds exactly; losing it numerically means P_t has grown
        // (doubly exponentially, for L small against P) past what f64 resolves.
        if !linalg::is_positive_definite(&s_next) {
            return Err(RiccatiError::Conditioning { t, what: "S_{t+1} is too ill-conditioned (P_t grows without bound for this L)" });
        }
        let (gtilde, gain) = completed_square(problem, &s_next)
            .ok_or(RiccatiError::Conditioning { t, what: "S_{t+1} could not be inverted" })?;
        let p_t = value_update(problem, &gtilde);
        if !linalg::is_positive_definite(&p_t) {
            return Err(RiccatiError::Conditioning { t, what: "P_t lost definiteness" });
        }
        a[t] = a[t + 1] + (&problem.sigma * (p_next + &l)).trace();
        p[t] = p_t;
        s[t] = s_next;
        k[t] = gain;
    }
    Ok(AcvarSchedule { l, p, a, s, k })
}

/// Output of [`leqr_recursion`]. Entries that were never reached because the
/// recursion broke down are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeqrSchedule {
    pub gamma: f64,
    /// `P̄_0 … P̄_N`.
    #[serde(rename = "Pbar", with = "serde_rows::opt_vec")]
    pub pbar: Vec<Option<Mat>>,
    /// `ptilde[t] = (P̄_{t+1}⁻¹ − γΣ)⁻¹`.
    #[serde(rename = "Ptilde", with = "serde_rows::opt_vec")]
    pub ptilde: Vec<Option<Mat>>,
    #[serde(rename = "K", with = "serde_rows::opt_vec")]
    pub k: Vec<Option<Mat>>,
    pub feasible: bool,
    /// The step `t` at which `Σ⁻¹ − γP̄_{t+1}` stopped being positive definite.
    pub failed_at: Option<usize>,
}

impl LeqrSchedule {
    /// Gains for every step, if the recursion completed.
    pub fn gains(&self) -> Option<Vec<Mat>> {
        self.k.iter().cloned().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Risk-sensitive (exponential utility) recursion
/// `P̄_t = Aᵀ(P̄_{t+1}⁻¹ + BR⁻¹Bᵀ − γΣ)⁻¹A + Q`.
///
/// Breakdown of `Σ⁻¹ − γP̄_{t+1} ≻ 0` is reported through `feasible` rather
/// than as an error.
pub fn leqr_recursion(problem: &LqProblem, gamma: f64) -> Result<LeqrSchedule, RiccatiError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(RiccatiError::BadParameter { name: "gamma", value: gamma });
    }
    let n = problem.n();
    let horizon = problem.horizon;
    let sigma_inv = linalg::spd_inverse(&problem.sigma).ok_or(RiccatiError::NotPositiveDefinite("Sigma"))?;
    let r_inv = linalg::spd_inverse(&problem.r).ok_or(RiccatiError::NotPositiveDefinite("R"))?;

    let mut pbar = vec![None; horizon + 1];
    let mut ptilde = vec![None; horizon];
    let mut k = vec![None; horizon];
    pbar[horizon] = Some(problem.qf.clone());
    let mut failed_at = None;

    for t in (0..horizon).rev() {
        let p_next = pbar[t + 1].clone().expect("filled by previous step");
        let margin = &sigma_inv - &p_next * gamma;
        let Some(margin_chol) = linalg::cholesky(&margin) else {
            failed_at = Some(t);
            break;
        };
        // P̃⁻¹ = P̄⁻¹ − γΣ directly: near the breakdown P̃ itself is huge.
        let p_inv = linalg::spd_inverse(&p_next).ok_or(RiccatiError::Conditioning { t, what: "P_{t+1} is singular" })?;
        let Some((gtilde, gain)) = completed_square_info(problem, &r_inv, &(p_inv - &problem.sigma * gamma)) else {
            failed_at = Some(t);
            break;
        };
        // Woodbury: (P⁻¹ − γΣ)⁻¹ = P + γ P (Σ⁻¹ − γP)⁻¹ P.
        let pt = linalg::symmetrize(&(&p_next + &p_next * margin_chol.solve(&p_next) * gamma));
        k[t] = Some(gain);
        pbar[t] = Some(value_update(problem, &gtilde));
        ptilde[t] = Some(pt);
    }
    debug_assert!(pbar.iter().flatten().all(|m| m.nrows() == n));
    Ok(LeqrSchedule { gamma, pbar, ptilde, k, feasible: failed_at.is_none(), failed_at })
}

/// Largest `γ` for which [`leqr_recursion`] completes, located by doubling
/// and bisection to absolute width `tol`.
///
/// Close to the breakdown the feasibility test is decided by round-off and
/// need not be monotone in `γ`. The bracket is therefore re-checked at
/// `γ_c ± tol` and the search continues until both sides agree.
pub fn critical_gamma(problem: &LqProblem, tol: f64) -> Result<f64, RiccatiError> {
    if !(tol > 0.0) {
        return Err(RiccatiError::BadParameter { name: "tol", value: tol });
    }
    let feasible = |g: f64| leqr_recursion(problem, g).map(|s| s.feasible);
    let mut lo = 1e-12;
    if !feasible(lo)? {
        return Err(RiccatiError::NoFeasibleGamma);
    }
    let mut hi = 1.0;
    while feasible(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(RiccatiError::Conditioning { t: 0, what: "critical gamma is unbounded" });
        }
    }
    for _ in 0..64 {
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if feasible(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let gc = 0.5 * (lo + hi);
        let above = gc + tol;
        if feasible(above)? {
            // A feasible island past the bracket: search above it.
            lo = above;
            hi = above.max(hi);
            while feasible(hi)? {
                lo = hi;
                hi += (hi - gc).max(tol);
            }
            continue;
        }
        let below = gc - tol;
        if below > 0.0 && !feasible(below)? {
            // An infeasible hole just below: restart beneath it.
            hi = below;
            let mut step = tol;
            lo = below - step;
            while lo > 1e-12 && !feasible(lo)? {
                hi = lo;
                step *= 2.0;
                lo = below - step;
            }
            if lo <= 1e-12 {
                return Err(RiccatiError::NoFeasibleGamma);
            }
            continue;
        }
        return Ok(gc);
    }
    Err(RiccatiError::Conditioning { t: 0, what: "critical gamma bracket does not settle" })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqGameSchedule {
    pub lambda: f64,
    /// `P̂_0 … P̂_N`; not necessarily positive definite.
    #[serde(rename = "Phat", with = "serde_rows::opt_vec")]
    pub phat: Vec<Option<Mat>>,
    pub feasible: bool,
    pub failed_at: Option<usize>,
}

impl LqGameSchedule {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Soft-constrained LQ game recursion
/// `P̂_t = Aᵀ(P̂_{t+1}⁻¹ + BR⁻¹Bᵀ − λ⁻²Σ)⁻¹A + Q`, stated for `R = I`.
/// The only feasibility condition tracked is invertibility.
pub fn lq_game_recursion(problem: &LqProblem, lambda: f64) -> Result<LqGameSchedule, RiccatiError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(RiccatiError::BadParameter { name: "lambda", value: lambda });
    }
    let m = problem.m();
    if (&problem.r - Mat::identity(m, m)).amax() > 1e-12 {
        return Err(RiccatiError::RNotIdentity);
    }
    let horizon = problem.horizon;
    let bbt = &problem.b * problem.b.transpose();
    let attenuation = &problem.sigma / (lambda * lambda);

    let mut phat = vec![None; horizon + 1];
    phat[horizon] = Some(problem.qf.clone());
    let mut failed_at = None;
    for t in (0..horizon).rev() {
        let p_next: &Mat = phat[t + 1].as_ref().expect("filled by previous step");
        let Some(p_inv) = p_next.clone().try_inverse() else {
            failed_at = Some(t);
            break;
        };
        let inner = p_inv + &bbt - &attenuation;
        if !linalg::is_invertible(&inner) {
            failed_at = Some(t);
            break;
        }
        let inner_inv = inner.try_inverse().expect("checked invertible");
        let p_t = value_update(problem, &linalg::symmetrize(&inner_inv));
        let ok = linalg::is_invertible(&p_t);
        phat[t] = Some(p_t);
        if !ok {
            failed_at = Some(t);
            break;
        }
    }
    Ok(LqGameSchedule { lambda, phat, feasible: failed_at.is_none(), failed_at })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSchedule {
    #[serde(rename = "P", with = "serde_rows::vec")]
    pub p: Vec<Mat>,
    #[serde(rename = "K", with = "serde_rows::vec")]
    pub k: Vec<Mat>,
}

impl LqrSchedule {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Risk-neutral recursion `P_t = Aᵀ G̃(P_{t+1}) A + Q`.
pub fn lqr_recursion(problem: &LqProblem) -> Result<LqrSchedule, RiccatiError> {
    let n = problem.n();
    let horizon = problem.horizon;
    let mut p = vec![Mat::zeros(n, n); horizon + 1];
    let mut k = vec![Mat::zeros(problem.m(), n); horizon];
    p[horizon] = problem.qf.clone();
    for t in (0..horizon).rev() {
        let (gtilde, gain) = completed_square(problem, &p[t + 1])
            .ok_or(RiccatiError::Conditioning { t, what: "P_{t+1} could not be inverted" })?;
        p[t] = value_update(problem, &gtilde);
        k[t] = gain;
    }
    Ok(LqrSchedule { p, k })
}

/// `‖P_0(L = scale·I) − P_0^LQR‖_F / ‖P_0^LQR‖_F`.
pub fn acvar_lqr_limit_gap(problem: &LqProblem, l_scale: f64) -> Result<f64, RiccatiError> {
    if !(l_scale > 0.0) {
        return Err(RiccatiError::BadParameter { name: "L_scale", value: l_scale });
    }
    let n = problem.n();
    let acvar = acvar_recursion(problem, &(Mat::identity(n, n) * l_scale))?;
    let lqr = lqr_recursion(problem)?;
    Ok((&acvar.p[0] - &lqr.p[0]).norm() / lqr.p[0].norm())
}
