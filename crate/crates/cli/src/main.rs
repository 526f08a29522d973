//! `acvar`: recursion tables, trade-off sweeps and bound verification.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use acvar_core::LqProblem;
use clap::{Args, Parser, Subcommand};

use commands::{Family, RiccatiParams};
use config::{ExperimentConfig, Needs};
use error::CliError;

#[derive(Parser)]
#[command(name = "acvar", version, about = "Risk-averse LQ control: recursions, sweeps and bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a Riccati schedule as a table and save it as JSON.
    Riccati {
        /// Experiment config; only its problem is used. Defaults to the
        /// scalar benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        family: Family,
        /// Scalar multiple of the identity used as L (acvar).
        #[arg(long = "L")]
        l: Option<f64>,
        /// Risk parameter (leqr).
        #[arg(long)]
        gamma: Option<f64>,
        /// Attenuation level (lqgame).
        #[arg(long)]
        lambda: Option<f64>,
        /// Where to save `riccati_<family>.json`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Print the JSON schedule instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run the trade-off sweep and write tradeoff.csv and meta.json.
    Sweep(Overrides),
    /// Check the closed-form bound against robust DP and Monte Carlo; writes verify.json.
    Verify {
        #[command(flatten)]
        overrides: Overrides,
        /// Replace a_0 by -1 before checking.
        #[arg(long, hide = true)]
        corrupt_a0: bool,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    /// Overrides master_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Riccati { config, family, l, gamma, lambda, output_dir, json } => {
            let (problem, dir) = match config {
                Some(path) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    cfg.validate(Needs::Riccati)?;
                    (cfg.problem, output_dir.or(Some(cfg.output_dir)))
                }
                None => (LqProblem::benchmark_scalar(), output_dir),
            };
            let params = RiccatiParams { l, gamma, lambda };
            commands::riccati(&problem, family, params, dir.as_deref(), json, &mut std::io::stdout().lock())
        }
        Command::Sweep(overrides) => {
            let cfg = overrides.load()?;
            let summary = commands::sweep(&cfg)?;
            let gc = summary.gamma_c.map_or("none".to_string(), |g| format!("{g:.10}"));
            println!("{} rows written to {} (gamma_c {gc})", summary.rows, cfg.output_dir.join("tradeoff.csv").display());
            Ok(())
        }
        Command::Verify { overrides, corrupt_a0 } => {
            let cfg = overrides.load()?;
            let report = commands::verify(&cfg, corrupt_a0)?;
            println!(
                "bound holds for L in {:?}: smallest DP margin {:.3e}, smallest Monte-Carlo margin {:.3e}",
                cfg.acvar_ls, report.min_dp_margin, report.min_monte_carlo_margin
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acvar: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
