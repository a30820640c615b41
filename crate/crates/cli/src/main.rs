//! `milrank` command line: train models, run cross-validation, generate
//! image-bag datasets, and score bags, with a reproducibility manifest for
//! every run.

mod config;
mod manifest;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::run::{CvRun, MnistBagsRun, ScoreRun, TrainRun};

#[derive(Parser)]
#[command(
    name = "milrank",
    version,
    about = "Multiple-instance learning with a bag-level pairwise ranking loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a bag dataset and write it to a JSON file.
    Train(run::TrainArgs),
    /// Repeated stratified k-fold cross-validation with a CSV + JSON report.
    Cv(run::CvArgs),
    /// Generate train/test image-bag manifests from MNIST-style IDX files.
    MnistBags(run::MnistBagsArgs),
    /// Score bags (optionally per instance) with a trained model.
    Score(run::ScoreArgs),
    /// Re-execute a command exactly as recorded in a run manifest.
    Rerun(run::RerunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => TrainRun::resolve(&args).and_then(|r| run::execute_train(&r)),
        Command::Cv(args) => CvRun::resolve(&args).and_then(|r| run::execute_cv(&r)),
        Command::MnistBags(args) => {
            MnistBagsRun::resolve(&args).and_then(|r| run::execute_mnist_bags(&r))
        }
        Command::Score(args) => ScoreRun::resolve(&args).and_then(|r| run::execute_score(&r)),
        Command::Rerun(args) => run::execute_rerun(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("milrank: error[{}]: {err}", err.code());
            ExitCode::FAILURE
        }
    }
}
