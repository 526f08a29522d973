use std::io::Write;
use std::path::Path;

use acvar_core::dp::lqr_control_span;
use acvar_core::mc::{write_tradeoff_csv, BoundValidation};
use acvar_core::{
    acvar_recursion, critical_gamma, leqr_recursion, lq_game_recursion, lqr_recursion, robust_value_iteration,
    tradeoff_sweep, validate_bound, verify_upper_bound, BoundReport, DisturbanceSpec, FiniteDisturbance, Grid2,
    LqProblem, Mat, RiccatiError, SeedSchedule, SweepConfig, Vector,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Needs};
use crate::error::CliError;
use crate::output::{write_atomic, write_json};

/// Bracket width used whenever `γ_c` is reported.
pub const GAMMA_C_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Family {
    Acvar,
    Leqr,
    Lqgame,
    Lqr,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RiccatiParams {
    pub l: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
}

fn fmt_mat(m: &Mat) -> String {
    if m.nrows() == 1 && m.ncols() == 1 {
        return format!("{:.9}", m[(0, 0)]);
    }
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("[{}]", r.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn fmt_opt(m: &Option<Mat>) -> String {
    m.as_ref().map_or_else(|| "-".to_string(), fmt_mat)
}

fn required(value: Option<f64>, flag: &str, family: &str) -> Result<f64, CliError> {
    value.ok_or_else(|| CliError::Config(format!("{flag} is required for --family {family}")))
}

/// Prints the schedule table to `out` (or its JSON with `json`), saves the
/// JSON under `out_dir` when given, and fails with `Infeasible` when the
/// recursion broke down.
pub fn riccati(
    problem: &LqProblem,
    family: Family,
    params: RiccatiParams,
    out_dir: Option<&Path>,
    json: bool,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let horizon = problem.horizon;
    let mut lines = Vec::new();
    let (name, doc, failed_at) = match family {
        Family::Acvar => {
            let l = required(params.l, "--L", "acvar")?;
            let n = problem.n();
            let s = acvar_recursion(problem, &(Mat::identity(n, n) * l))?;
            lines.push(format!("{:>3}  {:>16}  {:>16}", "t", "P_t", "a_t"));
            for t in 0..=horizon {
                lines.push(format!("{t:>3}  {:>16}  {:>16.9}", fmt_mat(&s.p[t]), s.a[t]));
            }
            ("acvar", s.to_json(), None)
        }
        Family::Lqr => {
            let s = lqr_recursion(problem)?;
            lines.push(format!("{:>3}  {:>16}", "t", "P_t"));
            for t in 0..=horizon {
                lines.push(format!("{t:>3}  {:>16}", fmt_mat(&s.p[t])));
            }
            ("lqr", s.to_json(), None)
        }
        Family::Leqr => {
            let gamma = required(params.gamma, "--gamma", "leqr")?;
            let s = leqr_recursion(problem, gamma)?;
            lines.push(format!("{:>3}  {:>16}  {:>16}", "t", "Pbar_t", "Ptilde_t"));
            for t in 0..=horizon {
                let pt = if t < horizon { fmt_opt(&s.ptilde[t]) } else { "-".into() };
                lines.push(format!("{t:>3}  {:>16}  {pt:>16}", fmt_opt(&s.pbar[t])));
            }
            lines.push(feasibility_line(s.failed_at));
            ("leqr", s.to_json(), s.failed_at.map(|t| ("LEQR", "gamma", gamma, t)))
        }
        Family::Lqgame => {
            let lambda = required(params.lambda, "--lambda", "lqgame")?;
            let s = lq_game_recursion(problem, lambda)?;
            lines.push(format!("{:>3}  {:>16}", "t", "Phat_t"));
            for t in 0..=horizon {
                lines.push(format!("{t:>3}  {:>16}", fmt_opt(&s.phat[t])));
            }
            lines.push(feasibility_line(s.failed_at));
            ("lqgame", s.to_json(), s.failed_at.map(|t| ("LQ game", "lambda", lambda, t)))
        }
    };
    let io = |e: std::io::Error| CliError::Config(format!("cannot write to stdout: {e}"));
    if json {
        writeln!(out, "{doc}").map_err(io)?;
    } else {
        for line in &lines {
            writeln!(out, "{line}").map_err(io)?;
        }
    }
    if let Some(dir) = out_dir {
        write_atomic(dir, &format!("riccati_{name}.json"), format!("{doc}\n").as_bytes())?;
    }
    match failed_at {
        Some((what, param, value, t)) => {
            Err(CliError::Infeasible(format!("{what} recursion with {param} = {value} breaks down at step t={t}")))
        }
        None => Ok(()),
    }
}

fn feasibility_line(failed_at: Option<usize>) -> String {
    match failed_at {
        None => "feasible: yes".into(),
        Some(t) => format!("feasible: no (breakdown at t={t})"),
    }
}

/// `γ_c`, or `None` when LEQR is feasible for every `γ` or for none.
pub fn gamma_c(problem: &LqProblem) -> Result<Option<f64>, CliError> {
    match critical_gamma(problem, GAMMA_C_TOL) {
        Ok(g) => Ok(Some(g)),
        Err(RiccatiError::NoFeasibleGamma) => Ok(None),
        Err(RiccatiError::Conditioning { what, .. }) if what.contains("unbounded") => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Serialize)]
pub struct Meta<'a> {
    pub seed: u64,
    pub gamma_c: Option<f64>,
    pub params: &'a ExperimentConfig,
    pub version: &'static str,
    pub timestamp: String,
}

#[derive(Debug)]
pub struct SweepSummary {
    pub rows: usize,
    pub gamma_c: Option<f64>,
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepSummary, CliError> {
    cfg.validate(Needs::Sweep)?;
    let problem = &cfg.problem;
    let gc = gamma_c(problem)?;
    let mut resolved = cfg.clone();
    resolved.leqr_gammas = Some(cfg.resolved_gammas(gc)?);
    let sweep_cfg = SweepConfig {
        x0: cfg.x0.clone(),
        alphas: cfg.alphas.clone(),
        acvar_ls: cfg.acvar_ls.clone(),
        leqr_gammas: resolved.leqr_gammas.clone().expect("just resolved"),
        exact_alphas: cfg.exact_alphas.clone(),
        trials: cfg.trials,
        seeds: SeedSchedule::new(cfg.master_seed),
        dist: cfg.disturbance(),
        exact_grid: cfg.exact_grid.clone(),
        include_zero: cfg.include_zero,
    };
    let rows = tradeoff_sweep(problem, &sweep_cfg)?;
    let mut csv = Vec::new();
    write_tradeoff_csv(&rows, cfg.master_seed, &mut csv).map_err(|e| CliError::Config(e.to_string()))?;
    write_atomic(&cfg.output_dir, "tradeoff.csv", &csv)?;
    let meta = Meta {
        seed: cfg.master_seed,
        gamma_c: gc,
        params: &resolved,
        version: env!("CARGO_PKG_VERSION"),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    write_json(&cfg.output_dir, "meta.json", &meta)?;
    Ok(SweepSummary { rows: rows.len(), gamma_c: gc })
}

#[derive(Debug, Serialize)]
pub struct VerifyEntry {
    #[serde(rename = "L")]
    pub l: f64,
    pub p0: f64,
    pub a0: f64,
    /// `ε_grid − max(V_grid − V_bound)`; nonnegative means pass.
    pub dp_margin: f64,
    pub dp: BoundReport,
    pub monte_carlo: BoundValidation,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub corrupted_a0: bool,
    pub support: Vec<f64>,
    pub sigma2: f64,
    pub grid: [usize; 3],
    pub min_dp_margin: f64,
    pub min_monte_carlo_margin: f64,
    pub passed: bool,
    pub results: Vec<VerifyEntry>,
}

/// Scalar laws with variance `sigma2`: Gaussian, symmetric two-point and
/// uniform.
fn member_laws(sigma2: f64) -> Vec<DisturbanceSpec> {
    vec![
        DisturbanceSpec::gaussian_scalar(sigma2),
        DisturbanceSpec::ScaledRademacher { scale: vec![sigma2.sqrt()] },
        DisturbanceSpec::Uniform { halfwidth: vec![(3.0 * sigma2).sqrt()] },
    ]
}

pub fn verify(cfg: &ExperimentConfig, corrupt_a0: bool) -> Result<VerifyReport, CliError> {
    let problem = &cfg.problem;
    if problem.validate().is_ok() && !problem.is_scalar() {
        return Err(CliError::Unsupported(
            "robust DP requires scalar disturbances (n > 1 would need a semidefinite adversary)".into(),
        ));
    }
    cfg.validate(Needs::Verify)?;
    let v = &cfg.verify;
    let sigma = problem.sigma[(0, 0)];
    let sigma2 = v.sigma2.unwrap_or(sigma);
    let support = FiniteDisturbance::new(v.support.clone(), sigma2)?;
    let gains: Vec<f64> = lqr_recursion(problem)?.k.iter().map(|k| k[(0, 0)]).collect();
    let span = lqr_control_span(&gains, v.x_range.0.abs().max(v.x_range.1.abs()));
    let grids = Grid2::uniform(v.x_range, v.nx, v.s_range, v.ns, (-span, span), v.nu)?;
    let vg = robust_value_iteration(problem, &support, &grids)?;

    let x0 = Vector::from_column_slice(&cfg.x0);
    let laws = member_laws(sigma);
    let seeds = SeedSchedule::new(cfg.master_seed);
    let mut results = Vec::with_capacity(cfg.acvar_ls.len());
    for &l in &cfg.acvar_ls {
        let mut schedule = acvar_recursion(problem, &Mat::from_element(1, 1, l))?;
        if corrupt_a0 {
            schedule.a[0] = -1.0;
        }
        let dp = verify_upper_bound(&vg, &schedule);
        let monte_carlo = validate_bound(problem, &schedule, &laws, &x0, cfg.trials, &seeds)?;
        results.push(VerifyEntry {
            l,
            p0: schedule.p[0][(0, 0)],
            a0: schedule.a[0],
            dp_margin: dp.epsilon_grid - dp.max_violation,
            dp,
            monte_carlo,
        });
    }
    let min_dp_margin = results.iter().map(|r| r.dp_margin).fold(f64::INFINITY, f64::min);
    let min_monte_carlo_margin =
        results.iter().flat_map(|r| r.monte_carlo.cells.iter().map(|c| c.margin)).fold(f64::INFINITY, f64::min);
    let passed = results.iter().all(|r| r.dp.passed && r.monte_carlo.passed);
    let report = VerifyReport {
        seed: cfg.master_seed,
        trials: cfg.trials,
        corrupted_a0: corrupt_a0,
        support: v.support.clone(),
        sigma2,
        grid: [v.nx, v.ns, v.nu],
        min_dp_margin,
        min_monte_carlo_margin,
        passed,
        results,
    };
    write_json(&cfg.output_dir, "verify.json", &report)?;
    if let Some(msg) = first_failure(&report) {
        return Err(CliError::Verification(msg));
    }
    Ok(report)
}

fn first_failure(report: &VerifyReport) -> Option<String> {
    for r in &report.results {
        if !r.dp.passed {
            return Some(format!(
                "L = {}: grid value exceeds a_0 + max(x^2 P_0 - s, 0) at node (x = {}, s = {}) by {:.6e} (eps_grid {:.3e})",
                r.l, r.dp.worst_x, r.dp.worst_s, r.dp.max_violation, r.dp.epsilon_grid
            ));
        }
        if let Some(c) = r.monte_carlo.cells.iter().find(|c| !c.passed) {
            return Some(format!(
                "L = {}: mean excess {:.6} under the {} law is above a_0 + 4 stderr = {:.6}",
                r.l,
                c.mean_excess,
                c.label,
                r.a0 + 4.0 * c.stderr
            ));
        }
    }
    None
}
