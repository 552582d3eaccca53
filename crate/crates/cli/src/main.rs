//! `flowvo` command-line tool.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "flowvo", version, about = "Flow-matching frame-to-frame motion estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Plain-text key=value file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Flags selecting the ODE solver and sample count.
#[derive(Args, Debug, Clone, Default)]
pub struct SolverArgs {
    /// euler, midpoint or rk4.
    #[arg(long)]
    pub method: Option<String>,
    /// Integration steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial draws per condition.
    #[arg(long)]
    pub samples: Option<usize>,
}

/// Flags selecting the evaluation protocol.
#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    /// none, se3 or sim3.
    #[arg(long)]
    pub align: Option<String>,
    /// per_pair, global or none.
    #[arg(long)]
    pub scale: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth trajectory.
    Gen {
        #[command(flatten)]
        common: Common,
        /// line, arc, figure8, random-walk, dirac, bimodal or ambiguity.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        ambiguity: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Condition dimension.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lift_seed: Option<u64>,
    },
    /// Train a vector-field network on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total optimizer steps.
        #[arg(long)]
        train_steps: Option<usize>,
    },
    /// Estimate a motion for every condition in a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score an estimated trajectory against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// Estimated trajectory (TUM or KITTI).
        #[arg(long)]
        est: Option<PathBuf>,
        /// Ground-truth trajectory (TUM or KITTI).
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Estimates CSV from `infer`, for the spread columns.
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Label for the metrics row.
        #[arg(long)]
        scenario: Option<String>,
        /// Match poses by nearest timestamp instead of by index.
        #[arg(long)]
        associate: bool,
    },
    /// Compare trajectory error across integration step counts.
    AblateSteps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated step counts.
        #[arg(long)]
        step_list: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            common,
            kind,
            n,
            ambiguity,
            noise,
            k,
            lift_seed,
        } => commands::gen(
            &common,
            commands::GenFlags {
                kind,
                n,
                ambiguity,
                noise,
                k,
                lift_seed,
            },
        ),
        Command::Train {
            common,
            dataset,
            checkpoint,
            train_steps,
        } => commands::train(&common, dataset, checkpoint, train_steps),
        Command::Infer {
            common,
            solver,
            dataset,
            checkpoint,
        } => commands::infer(&common, &solver, dataset, checkpoint),
        Command::Eval {
            common,
            eval,
            est,
            gt,
            estimates,
            scenario,
            associate,
        } => commands::eval(
            &common,
            &eval,
            commands::EvalFlags {
                est,
                gt,
                estimates,
                scenario,
                associate,
            },
        ),
        Command::AblateSteps {
            common,
            solver,
            eval,
            dataset,
            checkpoint,
            step_list,
        } => commands::ablate_steps(&common, &solver, &eval, dataset, checkpoint, step_list),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
