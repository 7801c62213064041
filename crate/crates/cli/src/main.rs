mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, Task};

/// Spiking Hebbian-memory experiments: association, length generalization,
/// Concentration with PPO, ANN-to-SNN conversion and gradient checks.
#[derive(Parser)]
#[command(name = "hebbsnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its manifest, metrics and checkpoints.
    Train(TrainArgs),
    /// Score a saved checkpoint.
    Eval(EvalArgs),
    /// Random and perfect-memory Concentration players.
    Baselines(BaselineArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "assoc")]
    pub task: Task,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with any subset of the config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted config key, e.g. `train.lr=0.001`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `train.iterations` (`ppo.iterations` for rl).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Output directory; defaults to `runs/<task>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `assoc` or `ood` for association checkpoints; agents are always `rl`.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// OOD test lengths: `a..b` (inclusive) or a comma list.
    #[arg(long)]
    pub lengths: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub games: Option<usize>,
    /// Seed of the held-out stream; defaults to the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where CSVs go; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long, default_value_t = 2)]
    pub pairs: usize,
    #[arg(long, default_value_t = 10_000)]
    pub games: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/baselines")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run::train(a),
        Command::Eval(a) => run::eval(a),
        Command::Baselines(a) => run::baselines(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
