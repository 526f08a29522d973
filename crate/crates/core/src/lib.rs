//! Risk-averse linear-quadratic control on the augmented state `(x, s)`.
//!
//! The crate provides:
//! - the CVaR upper-bound Riccati recursion with its LEQR, LQ-game and LQR baselines;
//! - LMI-certified synthesis of the CVaR controller;
//! - grid value iteration for the exact CVaR problem;
//! - a common-random-number Monte-Carlo harness.

pub mod dp;
pub mod linalg;
pub mod lp;
pub mod mc;
pub mod model;
pub mod policy;
pub mod quadrature;
pub mod riccati;
pub mod rng;

pub use dp::{
    extract_policy, known_dist_value_iteration, robust_value_iteration, verify_upper_bound, w_recursion_oracle,
    BoundReport, DiscreteDistribution, DpError, FiniteDisturbance, Grid2, SweepOptions, ValueGrid,
};
pub use linalg::{Mat, Vector};
pub use lp::{enumerate_vertices, solve_max, LpError, LpInstance, LpSolution};
pub use mc::{
    empirical_cvar, simulate, tradeoff_sweep, validate_bound, BoundValidation, ExactGridSpec, McError, RolloutStats,
    SweepConfig, SweepRow,
};
pub use model::{DisturbanceSpec, LqProblem, ModelError};
pub use policy::{
    initial_budget, rollout_step, synthesize_acvar_control, upper_bound_j, LmiCertificate, Policy, PolicyError,
};
pub use riccati::{
    acvar_lqr_limit_gap, acvar_recursion, critical_gamma, leqr_recursion, lq_game_recursion, lqr_recursion,
    AcvarSchedule, LeqrSchedule, LqGameSchedule, LqrSchedule, RiccatiError,
};
pub use rng::SeedSchedule;
