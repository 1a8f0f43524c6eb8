//! `cfam`: generate data, train and evaluate compatibility models, retrieve
//! compatible items and train or sample the conditional generator.

mod commands;
mod config;
mod dataset;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use cfam_core::compat::Mode;
use clap::{Args, Parser, Subcommand};

use crate::error::EXIT_USAGE;

#[derive(Debug, Parser)]
#[command(
    name = "cfam",
    version,
    about = "Compatibility families: train, evaluate, recommend and generate"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate items, split them and sample pairs.
    GenData,
    /// Train the compatibility model.
    Train(TrainArgs),
    /// Report AUC and error rate on every split.
    Eval(ModelArgs),
    /// Rank compatible candidates for query items.
    Recommend(RecommendArgs),
    /// Train the conditional generator against a frozen model.
    TrainGan(GanArgs),
    /// Write generated items for one query as PGM images.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "lambda-m")]
    pub lambda_m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Epochs to run; with `--resume`, epochs added after the checkpoint.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a `.last` checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Compatibility checkpoint (default: `<out>/compat.best`).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Expected sizes; a checkpoint that disagrees is rejected.
    #[command(flatten)]
    pub expect: ModelFlags,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[command(flatten)]
    pub common: ModelArgs,
    /// Rank by exact distance (default).
    #[arg(long, conflicts_with = "approx")]
    pub exact: bool,
    /// Merge one nearest-neighbour scan per prototype.
    #[arg(long)]
    pub approx: bool,
    #[arg(long = "top-n")]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GanArgs {
    #[command(flatten)]
    pub common: ModelArgs,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: ModelArgs,
    /// Generator checkpoint (default: `<out>/gan.ckpt`).
    #[arg(long)]
    pub gan: Option<PathBuf>,
    /// Condition on prototype `k` of the query (1-based).
    #[arg(long, conflicts_with = "style", required_unless_present = "style")]
    pub prototype: Option<usize>,
    /// Condition on the query's own embedding.
    #[arg(long)]
    pub style: bool,
    /// Query item id (default: first test item).
    #[arg(long)]
    pub query: Option<u32>,
    #[arg(long)]
    pub count: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
