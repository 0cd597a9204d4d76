mod config;
mod eval;
mod forge;
mod project;
mod score;
mod staging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::FileConfig;

/// Forge mixed real-synthetic LiDAR anomaly datasets, score features and
/// evaluate point-level anomaly detection.
#[derive(Debug, Parser)]
#[command(name = "lidar-ood", version)]
struct Cli {
    /// TOML file with `[forge]`, `[score]` and `[eval]` sections; command-line
    /// flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Insert anomaly objects into a sequence of labeled scans.
    Forge(forge::ForgeArgs),
    /// Project one scan to a range image and report occupancy.
    Project(project::ProjectArgs),
    /// Compute anomaly scores from per-scan feature files.
    Score(score::ScoreArgs),
    /// Evaluate score files against labels.
    Eval(eval::EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let file = match cli.config.as_deref().map(FileConfig::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let result = match cli.command {
        Command::Forge(a) => forge::run(a, file.forge),
        Command::Project(a) => project::run(a),
        Command::Score(a) => score::run(a, file.score),
        Command::Eval(a) => eval::run(a, file.eval),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
