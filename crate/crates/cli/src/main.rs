//! `recafr`: prepare data, train, evaluate, ablate, sweep review removal and
//! run the pilot similarity analysis.
//!
//! Configuration precedence: `--set key=value` overrides beat the `--config`
//! file, which beats built-in defaults.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "recafr", version, about = "Review-augmented contrastive collaborative filtering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, filter and split raw `user<TAB>item<TAB>review` interactions.
    Prepare(PrepareArgs),
    /// Train a model and write its checkpoint, loss history and test metrics.
    Train(TrainArgs),
    /// Score a saved checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Train the full model and its ablated variants and compare them.
    Ablate(ModelArgs),
    /// Retrain with growing fractions of reviews removed.
    Robustness(RobustnessArgs),
    /// Histogram same-entity versus cross-entity view similarity.
    Pilot(PilotArgs),
    /// Re-run a recorded invocation from its `run_manifest.json`.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw interaction file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only the k-core; omitted means no filtering.
    #[arg(long)]
    pub kcore: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep a random subset of this many users after filtering.
    #[arg(long)]
    pub sample_users: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Review embedding file (REMB).
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Also drop validation items from test-time candidates.
    #[arg(long)]
    pub exclude_valid: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the sampled review views to `views.tsv`.
    #[arg(long)]
    pub dump_views: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Supplies the backbone; other keys are ignored.
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub exclude_valid: bool,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated removal fractions in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
    pub fractions: Vec<f64>,
    /// Comma-separated seeds; each drives masking, views and training.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct PilotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub emb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Negative pairs drawn per entity.
    #[arg(long, default_value_t = 100)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the re-run; must differ from the recorded one
    /// to compare artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("RECAFR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("RECAFR_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = configure_threads().and_then(|()| commands::run(cli.command, &argv[1..]));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
