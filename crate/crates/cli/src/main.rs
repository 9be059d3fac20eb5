mod commands;
mod plots;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Spatio-temporal mixture-of-experts traffic forecasting.
#[derive(Debug, Parser)]
#[command(name = "testam", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic road network dataset with scenario tags.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints, history and plots.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test block of a dataset.
    Eval(EvalArgs),
    /// Summarize which expert the gate picks, by node, hour and scenario.
    Routes(EvalArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file, or a provenance file written by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.layers=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; replaces the `seed` field of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset: a `.csv` file or a binary bundle.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset: a `.csv` file or a binary bundle.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = commands::threads().and_then(|threads| match cli.command {
        Command::Generate(a) => commands::generate(&a.config.into(), &a.out, threads),
        Command::Train(a) => commands::train(&a.config.into(), &a.data, &a.out, a.checkpoint.as_deref(), threads),
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.data, &a.out, threads),
        Command::Routes(a) => commands::routes(&a.checkpoint, &a.data, &a.out, threads),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

impl From<ConfigArgs> for commands::ConfigSource {
    fn from(a: ConfigArgs) -> Self {
        Self {
            path: a.config,
            overrides: a.overrides,
            seed: a.seed,
        }
    }
}
