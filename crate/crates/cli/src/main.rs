//! `adajudge`: data generation, training, evaluation, ablation, analysis and
//! gradient checking from the command line.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "adajudge", version, about = "Adaptive reward-model head: train, evaluate and analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation dataset directory (default: hold out part of `--data`).
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of refinement blocks.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(commands::GenArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(commands::TrainArgs),
    /// Pairwise accuracy and routing profile of a trained run.
    Eval(commands::EvalArgs),
    /// Train and evaluate several variants under identical settings.
    Ablate(commands::AblateArgs),
    /// Routing-profile and gradient-alignment analyses of a trained run.
    Analyze(commands::AnalyzeArgs),
    /// Compare analytic and finite-difference gradients of the pair loss.
    Gradcheck(commands::GradcheckArgs),
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
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .downcast_ref::<adajudge_core::Error>()
                .is_some_and(adajudge_core::Error::is_numeric);
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}
