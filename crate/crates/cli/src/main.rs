mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rlr::config::ConfigError;
use rlr::eval::EvalError;
use rlr::features::FeatureError;
use rlr::model::ModelError;
use rlr::tensor::TensorError;
use rlr::train::TrainError;

/// Reference-based feature reconstruction for multi-class anomaly detection.
#[derive(Debug, Parser)]
#[command(name = "rlr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-class feature dataset with its manifest.
    GenSynth(GenSynthArgs),
    /// Train on the train split and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write the score map of one feature file as a PGM image.
    Score(ScoreArgs),
    /// Train and evaluate several block variants with identical settings.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for synthesis, initialisation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint to evaluate [default: <out>/checkpoint.rlrc].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint [default: <out>/checkpoint.rlrc].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Feature file to score.
    #[arg(long)]
    record: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated variants [default: all].
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

/// 1 for usage and config errors, 2 for data errors, 3 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFinite { .. } => 3,
                TrainError::Config(_) | TrainError::ConfigMismatch => 1,
                TrainError::Tensor(TensorError::NonFinite { .. }) => 3,
                TrainError::Model(ModelError::Config(_)) => 1,
                TrainError::Feature(FeatureError::Config(_)) => 1,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Model(ModelError::Config(_)) => 1,
                EvalError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<FeatureError>() {
            return if matches!(e, FeatureError::Config(_)) { 1 } else { 2 };
        }
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<ModelError>().is_some() {
            return 1;
        }
        if let Some(commands::DataError(_)) = cause.downcast_ref::<commands::DataError>() {
            return 2;
        }
    }
    1
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
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
