//! Monte-Carlo rollouts with common random numbers, cost statistics and the
//! policy-comparison sweep.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{self, DpError, Grid2};
use crate::linalg::{self, Mat, Vector};
use crate::model::{DisturbanceSpec, LqProblem, ModelError};
use crate::policy::{self, Policy, PolicyError};
use crate::riccati::{self, AcvarSchedule, RiccatiError};
use crate::rng::{SeedSchedule, SplitMix64};

#[derive(Debug, Error)]
pub enum McError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("cumulative cost of trial {trial} is not finite")]
    NonFiniteCost { trial: usize },
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("no samples")]
    Empty,
    #[error("invalid sweep: {0}")]
    BadParameter(String),
    #[error("LEQR is infeasible at gamma = {0}")]
    InfeasibleGamma(f64),
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
}

/// Draws disturbance vectors from a [`DisturbanceSpec`]. Each draw uses a
/// fixed number of uniforms (one per coordinate, one for finite support).
#[derive(Debug, Clone)]
pub struct DisturbanceSampler {
    spec: DisturbanceSpec,
    factor: Option<Mat>,
    cumulative: Vec<f64>,
}

impl DisturbanceSampler {
    pub fn new(spec: &DisturbanceSpec) -> Result<Self, ModelError> {
        spec.check()?;
        let factor = match spec {
            DisturbanceSpec::Gaussian { cov } => Some(linalg::psd_factor(cov)),
            _ => None,
        };
        let cumulative = match spec {
            DisturbanceSpec::FiniteSupport { probs, .. } => probs
                .iter()
                .scan(0.0, |acc, p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(DisturbanceSampler { spec: spec.clone(), factor, cumulative })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn draw(&self, rng: &mut SplitMix64) -> Vector {
        match &self.spec {
            DisturbanceSpec::Gaussian { .. } => {
                let f = self.factor.as_ref().expect("factor built for Gaussian laws");
                let z = Vector::from_iterator(f.ncols(), (0..f.ncols()).map(|_| rng.next_standard_normal()));
                f * z
            }
            DisturbanceSpec::ScaledRademacher { scale } => Vector::from_iterator(
                scale.len(),
                scale.iter().map(|s| if rng.next_open01() < 0.5 { -s } else { *s }),
            ),
            DisturbanceSpec::Uniform { halfwidth } => Vector::from_iterator(
                halfwidth.len(),
                halfwidth.iter().map(|h| (2.0 * rng.next_open01() - 1.0) * h),
            ),
            DisturbanceSpec::FiniteSupport { points, .. } => {
                let u = rng.next_open01();
                let j = self.cumulative.iter().position(|c| u < *c).unwrap_or(points.len() - 1);
                Vector::from_column_slice(&points[j])
            }
        }
    }
}

/// Neumaier-compensated sum in iteration order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn mean_of(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Unbiased sample standard deviation; zero for a single sample.
fn std_of(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    (ss / (values.len() - 1) as f64).sqrt()
}

fn check_alpha(alpha: f64) -> Result<(), McError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(McError::BadAlpha(alpha))
    }
}

/// Number of samples averaged by the top-`⌈αK⌉` estimator.
fn tail_count(alpha: f64, k: usize) -> usize {
    ((alpha * k as f64 * (1.0 - 1e-12)).ceil() as usize).clamp(1, k)
}

/// Mean of the `⌈αK⌉` largest samples.
pub fn empirical_cvar(samples: &[f64], alpha: f64) -> Result<f64, McError> {
    check_alpha(alpha)?;
    if samples.is_empty() {
        return Err(McError::Empty);
    }
    let sorted = sorted_descending(samples);
    Ok(cvar_sorted(&sorted, alpha))
}

fn sorted_descending(samples: &[f64]) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
}

fn cvar_sorted(sorted: &[f64], alpha: f64) -> f64 {
    mean_of(&sorted[..tail_count(alpha, sorted.len())])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvarEstimate {
    pub alpha: f64,
    pub value: f64,
    /// `sd(max(Z − VaR, 0)) / (α√K)` with `VaR` the `⌈αK⌉`-th largest sample.
    pub stderr: f64,
}

/// Summary of a cost sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    /// `std / √trials`.
    pub standard_error: f64,
    /// `std / √(2(trials − 1))`, the normal-theory error of `std`.
    pub std_stderr: f64,
    /// False when a single trial leaves the standard deviation undefined;
    /// `std` is then reported as zero.
    pub std_defined: bool,
    pub cvar: Vec<CvarEstimate>,
}

impl RolloutStats {
    pub fn from_samples(samples: &[f64], alphas: &[f64]) -> Result<Self, McError> {
        if samples.is_empty() {
            return Err(McError::Empty);
        }
        for a in alphas {
            check_alpha(*a)?;
        }
        let k = samples.len();
        let mean = mean_of(samples);
        let std = std_of(samples, mean);
        let sorted = sorted_descending(samples);
        let cvar = alphas
            .iter()
            .map(|&alpha| {
                let tail = tail_count(alpha, k);
                let var = sorted[tail - 1];
                let excess: Vec<f64> = sorted.iter().map(|z| (z - var).max(0.0)).collect();
                let excess_sd = std_of(&excess, mean_of(&excess));
                CvarEstimate { alpha, value: cvar_sorted(&sorted, alpha), stderr: excess_sd / (alpha * (k as f64).sqrt()) }
            })
            .collect();
        Ok(RolloutStats {
            trials: k,
            mean,
            std,
            standard_error: std / (k as f64).sqrt(),
            std_stderr: if k > 1 { std / (2.0 * (k - 1) as f64).sqrt() } else { 0.0 },
            std_defined: k > 1,
            cvar,
        })
    }

    pub fn cvar(&self, alpha: f64) -> Option<&CvarEstimate> {
        self.cvar.iter().find(|c| c.alpha == alpha)
    }
}

/// Cumulative cost `Z = Σ c_t + x_NᵀQf x_N` of every trial, in trial order.
/// Trial `i` draws `w_t` from the stream `seeds.stream(i, t)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_costs(
    problem: &LqProblem,
    policy: &Policy,
    dist: &DisturbanceSpec,
    x0: &Vector,
    s0: f64,
    trials: usize,
    seeds: &SeedSchedule,
) -> Result<Vec<f64>, McError> {
    if trials == 0 {
        return Err(McError::Empty);
    }
    if x0.len() != problem.n() {
        return Err(ModelError::DimensionMismatch(format!("x0 has length {}, expected {}", x0.len(), problem.n())).into());
    }
    let sampler = DisturbanceSampler::new(dist)?;
    if sampler.dim() != problem.n() {
        return Err(ModelError::DimensionMismatch(format!(
            "disturbance dimension {} differs from state dimension {}",
            sampler.dim(),
            problem.n()
        ))
        .into());
    }
    let run = |trial: usize| -> Result<f64, McError> {
        let mut x = x0.clone();
        let mut s = s0;
        let mut costs = Vec::with_capacity(problem.horizon + 1);
        for t in 0..problem.horizon {
            let mut rng = seeds.stream(trial as u64, t as u64);
            let w = sampler.draw(&mut rng);
            let step = policy::rollout_step(policy, &x, s, t, &w, problem)?;
            costs.push(step.cost);
            x = step.x_next;
            s = step.s_next;
        }
        costs.push(problem.terminal_cost(&x));
        let z = compensated_sum(costs);
        if z.is_finite() {
            Ok(z)
        } else {
            Err(McError::NonFiniteCost { trial })
        }
    };
    (0..trials).into_par_iter().map(run).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    problem: &LqProblem,
    policy: &Policy,
    dist: &DisturbanceSpec,
    x0: &Vector,
    s0: f64,
    trials: usize,
    seeds: &SeedSchedule,
    alphas: &[f64],
) -> Result<RolloutStats, McError> {
    let z = sample_costs(problem, policy, dist, x0, s0, trials, seeds)?;
    RolloutStats::from_samples(&z, alphas)
}

/// One disturbance law's check of `E max(Z − s0, 0) ≤ a_0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCell {
    pub label: String,
    pub mean_excess: f64,
    pub stderr: f64,
    /// `a_0 + 4·stderr − mean_excess`; nonnegative means pass.
    pub margin: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundValidation {
    pub s0: f64,
    pub a0: f64,
    pub cells: Vec<BoundCell>,
    pub passed: bool,
}

/// Rolls the certified CVaR controller from `s0 = x0ᵀP_0x0` under each law
/// and compares the mean of `max(Z − s0, 0)` with `a_0 + 4·stderr`.
pub fn validate_bound(
    problem: &LqProblem,
    schedule: &AcvarSchedule,
    dists: &[DisturbanceSpec],
    x0: &Vector,
    trials: usize,
    seeds: &SeedSchedule,
) -> Result<BoundValidation, McError> {
    let s0 = policy::initial_budget(x0, schedule);
    let a0 = schedule.a[0];
    let controller = Policy::acvar(schedule.clone());
    let mut cells = Vec::with_capacity(dists.len());
    for dist in dists {
        dist.check_member(problem)?;
        let z = sample_costs(problem, &controller, dist, x0, s0, trials, seeds)?;
        let excess: Vec<f64> = z.iter().map(|v| (v - s0).max(0.0)).collect();
        let mean_excess = mean_of(&excess);
        let stderr = std_of(&excess, mean_excess) / (excess.len() as f64).sqrt();
        let margin = a0 + 4.0 * stderr - mean_excess;
        cells.push(BoundCell { label: dist.label().to_string(), mean_excess, stderr, margin, passed: margin >= 0.0 });
    }
    let passed = cells.iter().all(|c| c.passed);
    Ok(BoundValidation { s0, a0, cells, passed })
}

/// Discretization used for the exact-CVaR comparator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactGridSpec {
    pub x_range: (f64, f64),
    pub nx: usize,
    pub s_range: (f64, f64),
    pub ns: usize,
    /// Control nodes over `±2·max|K_lqr|·max|x|`.
    pub nu: usize,
    pub quad_order: usize,
}

impl Default for ExactGridSpec {
    fn default() -> Self {
        ExactGridSpec { x_range: (-8.0, 8.0), nx: 321, s_range: (-4.0, 40.0), ns: 353, nu: 101, quad_order: 16 }
    }
}

impl ExactGridSpec {
    pub fn build(&self, problem: &LqProblem) -> Result<Grid2, McError> {
        let lqr = riccati::lqr_recursion(problem)?;
        let gains: Vec<f64> = lqr.k.iter().map(|k| k[(0, 0)]).collect();
        let x_max = self.x_range.0.abs().max(self.x_range.1.abs());
        let span = dp::lqr_control_span(&gains, x_max);
        Ok(Grid2::uniform(self.x_range, self.nx, self.s_range, self.ns, (-span, span), self.nu)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub x0: Vec<f64>,
    pub alphas: Vec<f64>,
    pub acvar_ls: Vec<f64>,
    pub leqr_gammas: Vec<f64>,
    pub exact_alphas: Vec<f64>,
    pub trials: usize,
    pub seeds: SeedSchedule,
    /// Disturbance law of every rollout; the exact-CVaR comparator assumes
    /// it is Gaussian and known.
    pub dist: DisturbanceSpec,
    pub exact_grid: ExactGridSpec,
    /// Also roll the zero policy.
    pub include_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub family: String,
    pub parameter: f64,
    pub stats: RolloutStats,
}

pub mod family {
    pub const LQR: &str = "lqr";
    pub const ZERO: &str = "zero";
    pub const ACVAR: &str = "acvar";
    pub const LEQR: &str = "leqr";
    pub const EXACT_CVAR: &str = "exact_cvar";
}

/// `count` log-spaced values from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == count {
                hi
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

/// One row per (family, parameter), all driven by the same seed schedule:
/// LQR, optionally the zero policy, the CVaR controller for each `L`, LEQR
/// for each `γ`, and the grid-optimal CVaR policy for each exact `α`.
pub fn tradeoff_sweep(problem: &LqProblem, cfg: &SweepConfig) -> Result<Vec<SweepRow>, McError> {
    if cfg.trials == 0 {
        return Err(McError::BadParameter("trials must be at least 1".into()));
    }
    let n = problem.n();
    let x0 = Vector::from_column_slice(&cfg.x0);
    let run = |policy: &Policy, s0: f64| simulate(problem, policy, &cfg.dist, &x0, s0, cfg.trials, &cfg.seeds, &cfg.alphas);
    let mut rows = Vec::new();

    let lqr = riccati::lqr_recursion(problem)?;
    rows.push(SweepRow {
        family: family::LQR.into(),
        parameter: 0.0,
        stats: run(&Policy::LinearFeedback { gains: lqr.k.clone() }, 0.0)?,
    });
    if cfg.include_zero {
        rows.push(SweepRow { family: family::ZERO.into(), parameter: 0.0, stats: run(&Policy::Zero, 0.0)? });
    }
    for &l in &cfg.acvar_ls {
        let schedule = riccati::acvar_recursion(problem, &(Mat::identity(n, n) * l))?;
        let s0 = policy::initial_budget(&x0, &schedule);
        let controller = Policy::acvar(schedule).with_certification(false);
        rows.push(SweepRow { family: family::ACVAR.into(), parameter: l, stats: run(&controller, s0)? });
    }
    for &gamma in &cfg.leqr_gammas {
        let schedule = riccati::leqr_recursion(problem, gamma)?;
        let gains = schedule.gains().ok_or(McError::InfeasibleGamma(gamma))?;
        rows.push(SweepRow {
            family: family::LEQR.into(),
            parameter: gamma,
            stats: run(&Policy::LinearFeedback { gains }, 0.0)?,
        });
    }
    if !cfg.exact_alphas.is_empty() {
        let DisturbanceSpec::Gaussian { cov } = &cfg.dist else {
            return Err(McError::BadParameter("the exact-CVaR comparator needs a Gaussian law".into()));
        };
        if !problem.is_scalar() {
            return Err(DpError::Unsupported("the exact-CVaR comparator is scalar only".into()).into());
        }
        let grid = cfg.exact_grid.build(problem)?;
        let vg = dp::known_dist_value_iteration(problem, cov[(0, 0)].sqrt(), cfg.exact_grid.quad_order, &grid)?;
        let grid_policy = dp::extract_policy(&vg);
        for &alpha in &cfg.exact_alphas {
            let (s_star, _) = vg.best_budget(x0[0], alpha)?;
            rows.push(SweepRow { family: family::EXACT_CVAR.into(), parameter: alpha, stats: run(&grid_policy, s_star)? });
        }
    }
    Ok(rows)
}

/// Writes `family,parameter,trials,mean,std,stderr,cvar_alpha,alpha,seed`,
/// one line per row and CVaR level.
pub fn write_tradeoff_csv<W: Write>(rows: &[SweepRow], seed: u64, out: W) -> Result<(), McError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["family", "parameter", "trials", "mean", "std", "stderr", "cvar_alpha", "alpha", "seed"])?;
    for row in rows {
        let s = &row.stats;
        for c in &s.cvar {
            w.write_record([
                row.family.clone(),
                row.parameter.to_string(),
                s.trials.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                s.standard_error.to_string(),
                c.value.to_string(),
                c.alpha.to_string(),
                seed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One parsed line of the tradeoff CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub family: String,
    pub parameter: f64,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub cvar_alpha: f64,
    pub alpha: f64,
    pub seed: u64,
}

pub fn read_tradeoff_csv<R: std::io::Read>(input: R) -> Result<Vec<TradeoffRecord>, McError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<TradeoffRecord>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_to_ten() -> Vec<f64> {
        (1..=10).map(f64::from).collect()
    }

    #[test]
    fn cvar_examples() {
        assert_eq!(empirical_cvar(&one_to_ten(), 0.2).unwrap(), 9.5);
        assert_eq!(empirical_cvar(&one_to_ten(), 1.0).unwrap(), 5.5);
        assert_eq!(empirical_cvar(&[3.25; 7], 0.3).unwrap(), 3.25);
        assert!(matches!(empirical_cvar(&one_to_ten(), 0.0), Err(McError::BadAlpha(_))));
        assert!(matches!(empirical_cvar(&[], 0.5), Err(McError::Empty)));
    }

    #[test]
    fn integer_tail_count_is_not_inflated_by_rounding() {
        assert_eq!(tail_count(0.05, 50_000), 2500);
        assert_eq!(tail_count(0.3, 10), 3);
        assert_eq!(tail_count(0.25, 10), 3);
        assert_eq!(tail_count(1e-9, 10), 1);
    }

    #[test]
    fn stats_invariants() {
        let mut rng = SplitMix64::new(5);
        let z: Vec<f64> = (0..1000).map(|_| rng.next_standard_normal().powi(2)).collect();
        let alphas = [0.05, 0.1, 0.3, 0.5, 1.0];
        let st = RolloutStats::from_samples(&z, &alphas).unwrap();
        assert!((st.cvar(1.0).unwrap().value - st.mean).abs() <= 1e-12);
        for w in st.cvar.windows(2) {
            assert!(w[0].value >= w[1].value);
        }
        assert!(st.std >= 0.0);
        assert!((st.cvar(1.0).unwrap().stderr - st.standard_error).abs() < 1e-12);
    }

    #[test]
    fn single_trial_flags_undefined_std() {
        let st = RolloutStats::from_samples(&[4.0], &[0.05]).unwrap();
        assert_eq!(st.std, 0.0);
        assert!(!st.std_defined);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(vals), 2.0);
    }

    #[test]
    fn samplers_match_their_moments() {
        let specs = [
            DisturbanceSpec::gaussian_scalar(1.0),
            DisturbanceSpec::ScaledRademacher { scale: vec![1.0] },
            DisturbanceSpec::Uniform { halfwidth: vec![3f64.sqrt()] },
            DisturbanceSpec::FiniteSupport { points: vec![vec![-1.0], vec![2.0]], probs: vec![2.0 / 3.0, 1.0 / 3.0] },
        ];
        let variances = [1.0, 1.0, 1.0, 2.0];
        for (spec, var) in specs.iter().zip(variances) {
            let sampler = DisturbanceSampler::new(spec).unwrap();
            let mut rng = SplitMix64::new(11);
            let n = 200_000;
            let draws: Vec<f64> = (0..n).map(|_| sampler.draw(&mut rng)[0]).collect();
            let mean = mean_of(&draws);
            let v = std_of(&draws, mean).powi(2);
            assert!(mean.abs() < 4.0 * (var / n as f64).sqrt() * 1.5, "{} mean {mean}", spec.label());
            assert!((v - var).abs() < 0.02 * var, "{} var {v}", spec.label());
        }
    }

    #[test]
    fn common_random_numbers_are_shared_and_reproducible() {
        let p = LqProblem::benchmark_scalar();
        let x0 = Vector::from_element(1, 1.0);
        let seeds = SeedSchedule::new(7);
        let dist = DisturbanceSpec::gaussian_scalar(1.0);
        let a = sample_costs(&p, &Policy::Zero, &dist, &x0, 0.0, 500, &seeds).unwrap();
        let b = sample_costs(&p, &Policy::Zero, &dist, &x0, 0.0, 500, &seeds).unwrap();
        assert_eq!(a, b);
        let other = sample_costs(&p, &Policy::Zero, &dist, &x0, 0.0, 500, &SeedSchedule::new(8)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noiseless_lqr_rollout_is_deterministic() {
        let p = LqProblem::benchmark_scalar();
        let lqr = riccati::lqr_recursion(&p).unwrap();
        let x0 = Vector::from_element(1, 1.0);
        let dist = DisturbanceSpec::gaussian_scalar(0.0);
        let pol = Policy::LinearFeedback { gains: lqr.k.clone() };
        let st = simulate(&p, &pol, &dist, &x0, 0.0, 64, &SeedSchedule::new(1), &[0.05]).unwrap();
        assert_eq!(st.std, 0.0);
        assert!((st.mean - lqr.p[0][(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn tradeoff_csv_round_trip() {
        let stats = RolloutStats::from_samples(&one_to_ten(), &[0.05, 1.0]).unwrap();
        let rows = vec![
            SweepRow { family: "lqr".into(), parameter: 0.0, stats: stats.clone() },
            SweepRow { family: "acvar".into(), parameter: 0.123_456_789_012_345_6, stats },
        ];
        let mut buf = Vec::new();
        write_tradeoff_csv(&rows, 42, &mut buf).unwrap();
        let back = read_tradeoff_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[2].parameter, 0.123_456_789_012_345_6);
        assert_eq!(back[1].cvar_alpha, rows[0].stats.cvar[1].value);
        assert_eq!(back[3].seed, 42);
    }

    #[test]
    fn log_spacing_hits_both_ends() {
        let v = log_spaced(0.2, 100.0, 5);
        assert_eq!(v[0], 0.2);
        assert_eq!(v[4], 100.0);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }
}
