//! Command-line driver: experiment runs, invariant checks, quadrature
//! reference tabulation, and run-set aggregation.

mod config;
mod refcmd;
mod reportcmd;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scoreflow::checks::{
    check_info_convergence, check_info_equality, check_loss_gradients, check_score_oracle_convergence,
    check_score_oracle_linear, check_score_scaling, check_spatial_derivatives, info_equality_samples,
    CheckOutcome,
};
use scoreflow::problems::{make_rwpo, ProblemSpec};
use scoreflow::velocity::LinearTimeVarying;
use scoreflow::{Error, Result, Tensor};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "scoreflow",
    version,
    about = "Deterministic score-transport experiments: training runs, invariant checks, and reference tables"
)]
struct Cli {
    /// Worker threads for quadrature reductions (0 = library default).
    /// Outputs are identical under any thread count; fixing the pool size
    /// makes wall times comparable between reruns.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every run of a JSON experiment config and write its artifacts.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Output directory (overrides the config and $SCOREFLOW_OUT_DIR).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run correctness invariants and print one PASS/FAIL line per check.
    Check {
        #[command(subcommand)]
        which: CheckCommand,
    },
    /// Tabulate a quadrature reference solution to CSV.
    Reference {
        /// Problem name (only double_well has a quadrature reference).
        problem: String,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        /// Grid step override (defaults to 0.01 in 1-d, 0.05 in 2-d).
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate errors.json files (or directories of them) into a table.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Finite-difference validation of every spatial derivative and of the
    /// loss gradients.
    Derivatives {
        #[arg(long, default_value_t = 24)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Rollout-vs-sensitivity score agreement on linear fields and
    /// step-size convergence on network fields.
    ScoreOracle {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Information equality on the exact quadratic-steering flow; several
    /// --dt values add a step-size convergence comparison.
    InfoEquality {
        /// Step size; repeat the flag (strictly decreasing) to compare.
        #[arg(long = "dt")]
        dt: Vec<f64>,
        /// Particles per measurement.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Wall-clock scaling of the two score computations with dimension.
    Scaling {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Every check above at its default settings.
    All {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// The closed-form steering field used as the known-good flow for
/// information-equality checks.
fn exact_steering() -> (ProblemSpec, LinearTimeVarying) {
    let spec = make_rwpo(1, 1.0).expect("reference problem builds");
    let field = LinearTimeVarying::new(
        1,
        |t| Tensor::matrix(1, 1, vec![-1.0 / (2.0 * (2.0 - t))]).expect("1x1 matrix"),
        |_| Tensor::vector(vec![0.0]),
    );
    (spec, field)
}

fn print_outcome(prefix: &str, outcome: &CheckOutcome) -> bool {
    let verdict = if outcome.passed { "PASS" } else { "FAIL" };
    println!("{verdict} {}{}: {}", outcome.name, prefix, outcome.detail);
    outcome.passed
}

fn run_checks(which: &CheckCommand) -> Result<bool> {
    let mut all_passed = true;
    let run = |outcome: CheckOutcome, all_passed: &mut bool| {
        *all_passed &= print_outcome("", &outcome);
    };
    match which {
        CheckCommand::Derivatives { instances, seed } => {
            run(check_spatial_derivatives(*instances, *seed)?, &mut all_passed);
            run(check_loss_gradients(*instances, *seed)?, &mut all_passed);
        }
        CheckCommand::ScoreOracle { seed } => {
            run(check_score_oracle_linear(*seed)?, &mut all_passed);
            run(check_score_oracle_convergence(*seed)?, &mut all_passed);
        }
        CheckCommand::InfoEquality { dt, n, seed } => {
            let (spec, field) = exact_steering();
            let dts = if dt.is_empty() { vec![0.01] } else { dt.clone() };
            for &step in &dts {
                let outcome = check_info_equality("info-equality", &spec, &field, step, *n, *seed)?;
                all_passed &= print_outcome(&format!(" (dt={step})"), &outcome);
            }
            if dts.len() >= 3 {
                run(check_info_convergence(&spec, &field, &dts, *n, *seed)?, &mut all_passed);
            } else if dts.len() == 2 {
                // Two steps give one bias slope: report it without gating.
                let r0 = info_equality_samples(&spec, &field, dts[0], *n, *seed, &[spec.t_end])?;
                let r1 = info_equality_samples(&spec, &field, dts[1], *n, *seed, &[spec.t_end])?;
                let slope = (r0[0].residual - r1[0].residual) / (dts[0] - dts[1]);
                println!(
                    "INFO info-equality-slope: terminal residual moves {:.3e} -> {:.3e} as dt {} -> {} (bias slope {slope:.3e})",
                    r0[0].residual, r1[0].residual, dts[0], dts[1]
                );
            }
        }
        CheckCommand::Scaling { seed } => {
            run(check_score_scaling(*seed)?, &mut all_passed);
        }
        CheckCommand::All { seed } => {
            run(check_spatial_derivatives(24, *seed)?, &mut all_passed);
            run(check_loss_gradients(24, *seed)?, &mut all_passed);
            run(check_score_oracle_linear(*seed)?, &mut all_passed);
            run(check_score_oracle_convergence(*seed)?, &mut all_passed);
            let (spec, field) = exact_steering();
            run(
                check_info_equality("info-equality", &spec, &field, 0.01, 10_000, *seed)?,
                &mut all_passed,
            );
            run(
                check_info_convergence(&spec, &field, &[0.02, 0.01, 0.005], 20_000, *seed)?,
                &mut all_passed,
            );
            run(check_score_scaling(*seed)?, &mut all_passed);
        }
    }
    Ok(all_passed)
}

fn dispatch(cli: &Cli, threads: usize) -> Result<ExitCode> {
    match &cli.command {
        Command::Run { config, output } => {
            let cfg = ExperimentConfig::load(config)?;
            let dir = runner::run_experiment(&cfg, output.as_deref(), threads)?;
            println!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { which } => {
            let all_passed = run_checks(which)?;
            Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Reference { problem, dim, step, output } => {
            let dir = refcmd::run_reference(problem, *dim, *step, output.as_deref())?;
            println!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { paths } => {
            reportcmd::run_report(paths)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // A later duplicate initialization (e.g. in tests) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let threads = if cli.threads > 0 { cli.threads } else { rayon::current_num_threads() };
    match dispatch(&cli, threads) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::InvalidProblem(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
