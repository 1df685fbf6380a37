//! `precofact` command-line entry point.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "precofact",
    version,
    about = "Multi-modal fact verification engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.pcfm and epochs.jsonl to the output directory.
    Train(TrainArgs),
    /// Score a model on a labeled dataset.
    Eval(EvalArgs),
    /// Write per-sample class probabilities.
    Predict(PredictArgs),
    /// Combine prediction files with power-weighted averaging.
    Ensemble(EnsembleArgs),
    /// Write a seeded synthetic dataset.
    GenerateSynthetic(SyntheticArgs),
    /// Summarize a dataset, checkpoint or prediction file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `paths.train`.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Overrides `paths.validation`.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Overrides `paths.output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a state file written during an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the predictions to this file.
    #[arg(long)]
    pub dump_preds: Option<PathBuf>,
    /// Print the report as one JSON line.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model tag stored in the file; defaults to the model file stem.
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub preds: Vec<PathBuf>,
    /// One weight per prediction file.
    #[arg(long, num_args = 1..)]
    pub weights: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub power: f64,
    /// Labeled dataset whose sample ids match the predictions.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Search weights and powers for the best weighted F1; needs --labels.
    #[arg(long)]
    pub grid: bool,
    /// Candidate values for every weight.
    #[arg(long, num_args = 1.., default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
    pub grid_weights: Vec<f64>,
    #[arg(long, num_args = 1.., default_values_t = [0.25, 0.5, 1.0, 2.0])]
    pub grid_powers: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub text_width: usize,
    #[arg(long, default_value_t = 8)]
    pub image_width: usize,
    /// Tokens per source: claim image, claim text, document image, document text.
    #[arg(long, num_args = 4, default_values_t = [2, 3, 2, 3])]
    pub tokens: Vec<usize>,
    #[arg(long, default_value_t = 5.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// `clouds` or `cross_modal`.
    #[arg(long, default_value = "clouds")]
    pub task: String,
    #[arg(long)]
    pub unlabeled: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("PRECOFACT_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::config(format!(
                "PRECOFACT_THREADS must be a positive integer, got `{value}`"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
        Command::Ensemble(args) => commands::ensemble(args),
        Command::GenerateSynthetic(args) => commands::generate_synthetic(args),
        Command::Inspect(args) => commands::inspect(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::flags(first.trim_start_matches("error: ")));
            return ExitCode::from(error::EXIT_FLAGS as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code as u8)
        }
    }
}
