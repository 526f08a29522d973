use std::path::{Path, PathBuf};

use acvar_core::mc::log_spaced;
use acvar_core::{DisturbanceSpec, ExactGridSpec, LqProblem};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One experiment: the problem, the sweep lists and where artifacts go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: LqProblem,
    pub x0: Vec<f64>,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(rename = "acvar_Ls")]
    pub acvar_ls: Vec<f64>,
    /// Filled from `γ_c` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leqr_gammas: Option<Vec<f64>>,
    /// May be empty, which skips the grid comparator.
    pub exact_alphas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub include_zero: bool,
    /// Rollout law; Gaussian with covariance `Σ` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default)]
    pub exact_grid: ExactGridSpec,
    #[serde(default)]
    pub verify: VerifySettings,
}

fn yes() -> bool {
    true
}

/// Grids and support for `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    /// Disturbance support points of the ambiguity set.
    pub support: Vec<f64>,
    /// Variance bound of the ambiguity set; `Σ` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    pub x_range: (f64, f64),
    pub nx: usize,
    pub s_range: (f64, f64),
    pub ns: usize,
    pub nu: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            support: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            sigma2: None,
            x_range: (-6.0, 6.0),
            nx: 121,
            s_range: (-5.0, 40.0),
            ns: 121,
            nu: 101,
        }
    }
}

/// Which lists a subcommand relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Riccati,
    Sweep,
    Verify,
}

impl ExperimentConfig {
    pub fn parse(doc: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(doc);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let at = if path == "." { String::new() } else { format!("field `{path}`: ") };
            CliError::Config(format!("{at}{inner}"))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let doc = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&doc).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn disturbance(&self) -> DisturbanceSpec {
        self.disturbance.clone().unwrap_or_else(|| DisturbanceSpec::Gaussian { cov: self.problem.sigma.clone() })
    }

    /// The LEQR grid: the configured list, or ten log-spaced points in
    /// `[γ_c/10, γ_c)` plus a near-risk-neutral `γ_c·1e-6`.
    pub fn resolved_gammas(&self, gamma_c: Option<f64>) -> Result<Vec<f64>, CliError> {
        match (&self.leqr_gammas, gamma_c) {
            (Some(g), _) => Ok(g.clone()),
            (None, Some(gc)) => {
                let mut g = log_spaced(gc / 10.0, gc * (1.0 - 1e-6), 10);
                g.push(gc * 1e-6);
                Ok(g)
            }
            (None, None) => Err(CliError::Config(
                "leqr_gammas is absent and no finite critical gamma exists to fill it".into(),
            )),
        }
    }

    /// Checks every field, reporting all problems at once.
    pub fn validate(&self, needs: Needs) -> Result<(), CliError> {
        let mut issues = Vec::new();
        if let Err(report) = self.problem.validate() {
            for v in &report.violations {
                issues.push(format!("problem: {v}"));
            }
        }
        let n = self.problem.n();
        if needs != Needs::Riccati {
            if self.x0.len() != n {
                issues.push(format!("x0: length {} but the state has dimension {n}", self.x0.len()));
            }
            if self.x0.iter().any(|v| !v.is_finite()) {
                issues.push("x0: entries must be finite".into());
            }
            if self.trials == 0 {
                issues.push("trials: must be at least 1".into());
            }
            if self.acvar_ls.is_empty() {
                issues.push("acvar_Ls: must not be empty".into());
            }
        }
        for (i, l) in self.acvar_ls.iter().enumerate() {
            if !(*l > 0.0 && l.is_finite()) {
                issues.push(format!("acvar_Ls[{i}]: {l} is not a positive finite number"));
            }
        }
        if let Some(g) = &self.leqr_gammas {
            if g.is_empty() && needs == Needs::Sweep {
                issues.push("leqr_gammas: must not be empty when given; omit it to use the default grid".into());
            }
            for (i, v) in g.iter().enumerate() {
                if !(*v > 0.0 && v.is_finite()) {
                    issues.push(format!("leqr_gammas[{i}]: {v} is not a positive finite number"));
                }
            }
        }
        if needs == Needs::Sweep && self.alphas.is_empty() {
            issues.push("alphas: must not be empty".into());
        }
        for (name, list) in [("alphas", &self.alphas), ("exact_alphas", &self.exact_alphas)] {
            for (i, a) in list.iter().enumerate() {
                if !(*a > 0.0 && *a <= 1.0) {
                    issues.push(format!("{name}[{i}]: {a} is outside (0, 1]"));
                }
            }
        }
        if let Some(d) = &self.disturbance {
            if let Err(e) = d.check() {
                issues.push(format!("disturbance: {e}"));
            } else if d.dim() != n {
                issues.push(format!("disturbance: dimension {} but the state has dimension {n}", d.dim()));
            }
        }
        if needs == Needs::Verify {
            let v = &self.verify;
            if v.support.is_empty() {
                issues.push("verify.support: must not be empty".into());
            }
            if let Some(s2) = v.sigma2 {
                if !(s2 > 0.0 && s2.is_finite()) {
                    issues.push(format!("verify.sigma2: {s2} is not a positive finite number"));
                }
            }
            for (name, count) in [("nx", v.nx), ("ns", v.ns), ("nu", v.nu)] {
                if count < 3 {
                    issues.push(format!("verify.{name}: need at least 3 nodes, got {count}"));
                }
            }
            for (name, (lo, hi)) in [("x_range", v.x_range), ("s_range", v.s_range)] {
                if !(lo < hi) {
                    issues.push(format!("verify.{name}: lower end {lo} is not below upper end {hi}"));
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(issues.join("; ")))
        }
    }
}
