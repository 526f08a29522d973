//! Problem instances, disturbance families and the zero-control cost bound.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, serde_rows, Mat, Vector};

/// One violated invariant of an [`LqProblem`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    NotPositiveDefinite(&'static str),
    DimensionMismatch(&'static str, &'static str),
    BadHorizon,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotPositiveDefinite(field) => write!(f, "{field} is not positive definite"),
            Violation::DimensionMismatch(a, b) => write!(f, "dimensions of {a} and {b} disagree"),
            Violation::BadHorizon => write!(f, "horizon N must be at least 1"),
        }
    }
}

/// Every invariant violated by a problem instance.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn contains(&self, v: &Violation) -> bool {
        self.violations.contains(v)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("disturbance is outside the ambiguity set: {0}")]
    NotInAmbiguitySet(String),
    #[error("malformed disturbance: {0}")]
    BadDisturbance(String),
    #[error("problem document: {0}")]
    Json(#[from] serde_json::Error),
}

/// Linear time-invariant system `x' = A x + B u + w` with quadratic costs over
/// a horizon of `N` steps. Disturbances are zero mean with covariance `⪯ Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqProblem {
    #[serde(rename = "A", with = "serde_rows")]
    pub a: Mat,
    #[serde(rename = "B", with = "serde_rows")]
    pub b: Mat,
    #[serde(rename = "Q", with = "serde_rows")]
    pub q: Mat,
    #[serde(rename = "R", with = "serde_rows")]
    pub r: Mat,
    #[serde(rename = "Qf", with = "serde_rows")]
    pub qf: Mat,
    #[serde(rename = "Sigma", with = "serde_rows")]
    pub sigma: Mat,
    #[serde(rename = "N")]
    pub horizon: usize,
}

impl LqProblem {
    /// Builds and validates a problem.
    pub fn new(a: Mat, b: Mat, q: Mat, r: Mat, qf: Mat, sigma: Mat, horizon: usize) -> Result<Self, ModelError> {
        let p = LqProblem { a, b, q, r, qf, sigma, horizon };
        p.validate().map_err(ModelError::Invalid)?;
        Ok(p)
    }

    /// Scalar instance `x' = a x + b u + w`.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, qf: f64, sigma: f64, horizon: usize) -> Result<Self, ModelError> {
        let s = |v: f64| Mat::from_element(1, 1, v);
        Self::new(s(a), s(b), s(q), s(r), s(qf), s(sigma), horizon)
    }

    /// The scalar benchmark system: `x' = x + u + w`, `Q = 1e-3`,
    /// `R = Qf = Σ = 1`, four steps.
    pub fn benchmark_scalar() -> Self {
        Self::scalar(1.0, 1.0, 1e-3, 1.0, 1.0, 1.0, 4).expect("benchmark problem is valid")
    }

    pub fn from_json(doc: &str) -> Result<Self, ModelError> {
        let p: LqProblem = serde_json::from_str(doc)?;
        p.validate().map_err(ModelError::Invalid)?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrices serialize")
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Control dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_scalar(&self) -> bool {
        self.n() == 1 && self.m() == 1
    }

    /// Checks every invariant, collecting all violations.
    pub fn validate(&self) -> Result<(), ValidationReport> {
        let mut report = ValidationReport::default();
        let n = self.a.nrows();
        let m = self.b.ncols();
        let mut push = |v: Violation| {
            if !report.violations.contains(&v) {
                report.violations.push(v);
            }
        };

        if !self.a.is_square() {
            push(Violation::DimensionMismatch("A", "A"));
        }
        if self.b.nrows() != n {
            push(Violation::DimensionMismatch("A", "B"));
        }
        let square_checks: [(&'static str, &Mat, usize, &'static str); 4] = [
            ("Q", &self.q, n, "A"),
            ("R", &self.r, m, "B"),
            ("Qf", &self.qf, n, "A"),
            ("Sigma", &self.sigma, n, "A"),
        ];
        for (name, mat, dim, partner) in square_checks {
            if mat.nrows() != dim || mat.ncols() != dim {
                push(Violation::DimensionMismatch(partner, name));
            } else if !linalg::is_positive_definite(mat) {
                push(Violation::NotPositiveDefinite(name));
            }
        }
        if self.horizon < 1 {
            push(Violation::BadHorizon);
        }
        if report.violations.is_empty() {
            Ok(())
        } else {
            Err(report)
        }
    }

    /// `xᵀQx + uᵀRu`.
    pub fn stage_cost(&self, x: &Vector, u: &Vector) -> Result<f64, ModelError> {
        if x.len() != self.n() || u.len() != self.m() {
            return Err(ModelError::DimensionMismatch(format!(
                "stage cost expects x in R^{} and u in R^{}, got {} and {}",
                self.n(),
                self.m(),
                x.len(),
                u.len()
            )));
        }
        Ok(linalg::quad_form(&self.q, x) + linalg::quad_form(&self.r, u))
    }

    /// `xᵀ Qf x`.
    pub fn terminal_cost(&self, x: &Vector) -> f64 {
        linalg::quad_form(&self.qf, x)
    }

    /// `A x + B u + w`.
    pub fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        &self.a * x + &self.b * u + w
    }

    /// Expected cumulative cost of the all-zero control sequence when every
    /// disturbance has covariance exactly `Σ`; an upper bound on that
    /// expectation for every member of the ambiguity set.
    ///
    /// Stacks the trajectory `X = F x0 + G W` with `F = [A; A²; …; A^N]` and
    /// `G` block lower triangular with blocks `A^(i-j)`.
    pub fn zero_policy_bound(&self, x0: &Vector) -> Result<f64, ModelError> {
        let n = self.n();
        if x0.len() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "x0 has length {}, expected {n}",
                x0.len()
            )));
        }
        let horizon = self.horizon;
        let dim = horizon * n;

        // powers[k] = A^k
        let mut powers = Vec::with_capacity(horizon + 1);
        powers.push(Mat::identity(n, n));
        for k in 1..=horizon {
            let next = &powers[k - 1] * &self.a;
            powers.push(next);
        }

        let mut f = Mat::zeros(dim, n);
        let mut g = Mat::zeros(dim, dim);
        let mut q_bar = Mat::zeros(dim, dim);
        let mut sigma_bar = Mat::zeros(dim, dim);
        for i in 0..horizon {
            f.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
            for j in 0..=i {
                g.view_mut((i * n, j * n), (n, n)).copy_from(&powers[i - j]);
            }
            let cost = if i + 1 == horizon { &self.qf } else { &self.q };
            q_bar.view_mut((i * n, i * n), (n, n)).copy_from(cost);
            sigma_bar.view_mut((i * n, i * n), (n, n)).copy_from(&self.sigma);
        }

        let fx = &f * x0;
        let state_part = fx.dot(&(&q_bar * &fx));
        let noise_part = (&g * &sigma_bar * g.transpose() * &q_bar).trace();
        Ok(linalg::quad_form(&self.q, x0) + state_part + noise_part)
    }
}

/// Zero-mean disturbance family used in experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceSpec {
    /// Multivariate normal with the given covariance (PSD, may be singular).
    Gaussian {
        #[serde(with = "serde_rows")]
        cov: Mat,
    },
    /// Independent `±scale_i` coordinates with probability one half each.
    ScaledRademacher { scale: Vec<f64> },
    /// Independent `U(-h_i, h_i)` coordinates.
    Uniform { halfwidth: Vec<f64> },
    /// Discrete law on `points` with weights `probs`.
    FiniteSupport { points: Vec<Vec<f64>>, probs: Vec<f64> },
}

impl DisturbanceSpec {
    pub fn gaussian_scalar(variance: f64) -> Self {
        DisturbanceSpec::Gaussian { cov: Mat::from_element(1, 1, variance) }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DisturbanceSpec::Gaussian { .. } => "gaussian",
            DisturbanceSpec::ScaledRademacher { .. } => "rademacher",
            DisturbanceSpec::Uniform { .. } => "uniform",
            DisturbanceSpec::FiniteSupport { .. } => "finite",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DisturbanceSpec::Gaussian { cov } => cov.nrows(),
            DisturbanceSpec::ScaledRademacher { scale } => scale.len(),
            DisturbanceSpec::Uniform { halfwidth } => halfwidth.len(),
            DisturbanceSpec::FiniteSupport { points, .. } => points.first().map_or(0, Vec::len),
        }
    }

    pub fn mean(&self) -> Vector {
        match self {
            DisturbanceSpec::FiniteSupport { points, probs } => {
                let mut mean = Vector::zeros(self.dim());
                for (p, w) in probs.iter().zip(points) {
                    mean += Vector::from_column_slice(w) * *p;
                }
                mean
            }
            _ => Vector::zeros(self.dim()),
        }
    }

    pub fn covariance(&self) -> Mat {
        match self {
            DisturbanceSpec::Gaussian { cov } => linalg::symmetrize(cov),
            DisturbanceSpec::ScaledRademacher { scale } => {
                Mat::from_diagonal(&Vector::from_iterator(scale.len(), scale.iter().map(|s| s * s)))
            }
            DisturbanceSpec::Uniform { halfwidth } => Mat::from_diagonal(&Vector::from_iterator(
                halfwidth.len(),
                halfwidth.iter().map(|h| h * h / 3.0),
            )),
            DisturbanceSpec::FiniteSupport { points, probs } => {
                let d = self.dim();
                let mut cov = Mat::zeros(d, d);
                for (p, w) in probs.iter().zip(points) {
                    let v = Vector::from_column_slice(w);
                    cov += &v * v.transpose() * *p;
                }
                cov
            }
        }
    }

    /// Internal consistency of the law itself (finite weights, zero mean).
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadDisturbance(msg));
        match self {
            DisturbanceSpec::Gaussian { cov } => {
                if !cov.is_square() || cov.iter().any(|v| !v.is_finite()) {
                    return bad("covariance must be a finite square matrix".into());
                }
                let tol = linalg::pd_tolerance(cov);
                if cov.nrows() > 0 && linalg::min_eigenvalue(cov) < -tol {
                    return bad("covariance is not positive semidefinite".into());
                }
            }
            DisturbanceSpec::ScaledRademacher { scale: v } | DisturbanceSpec::Uniform { halfwidth: v } => {
                if v.iter().any(|s| !s.is_finite() || *s < 0.0) {
                    return bad("scales must be finite and nonnegative".into());
                }
            }
            DisturbanceSpec::FiniteSupport { points, probs } => {
                if points.is_empty() || points.len() != probs.len() {
                    return bad("points and probs must be nonempty and of equal length".into());
                }
                let d = points[0].len();
                if points.iter().any(|w| w.len() != d || w.iter().any(|v| !v.is_finite())) {
                    return bad("support points must share one finite dimension".into());
                }
                if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return bad("probabilities must be nonnegative".into());
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return bad(format!("probabilities sum to {total}, not 1"));
                }
                let scale = points.iter().flatten().fold(1.0_f64, |acc, v| acc.max(v.abs()));
                if self.mean().amax() > 1e-12 * scale {
                    return bad("finite-support law does not have zero mean".into());
                }
            }
        }
        Ok(())
    }

    /// Membership in the ambiguity set of `problem`: zero mean and
    /// `cov ⪯ Σ` up to the positive-definiteness tolerance.
    pub fn check_member(&self, problem: &LqProblem) -> Result<(), ModelError> {
        self.check()?;
        if self.dim() != problem.n() {
            return Err(ModelError::DimensionMismatch(format!(
                "disturbance dimension {} differs from state dimension {}",
                self.dim(),
                problem.n()
            )));
        }
        let gap = &problem.sigma - self.covariance();
        let tol = linalg::pd_tolerance(&problem.sigma);
        let lowest = linalg::min_eigenvalue(&gap);
        if lowest < -tol {
            return Err(ModelError::NotInAmbiguitySet(format!(
                "Sigma - cov has eigenvalue {lowest:e}"
            )));
        }
        Ok(())
    }
}
