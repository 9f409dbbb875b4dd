//! `kicrank`: preprocess, train, predict, evaluate and long-tail analysis
//! driven by one TOML run configuration.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use kicrank::gateway::BackendKind;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "kicrank", version, about = "Knowledge-graph completion with LLM re-ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build demonstration orders (and aligned templates when enabled).
    Preprocess(Common),
    /// Train the embedding retriever and write its checkpoint.
    Train(Common),
    /// Re-rank the configured split and write per-query predictions.
    Predict(Common),
    /// Re-rank the configured split and write metrics reports.
    Evaluate(Common),
    /// Degree-grouped metrics from the last evaluation.
    Longtail(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the gateway backend.
    #[arg(long, value_parser = clap::value_parser!(BackendKind))]
    backend: Option<BackendKind>,
    /// Where artifacts are read and written.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Preprocess(c) => (c, commands::preprocess),
        Command::Train(c) => (c, commands::train),
        Command::Predict(c) => (c, commands::predict),
        Command::Evaluate(c) => (c, commands::evaluate),
        Command::Longtail(c) => (c, commands::longtail),
    };
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let overrides = Overrides {
        seed: common.seed,
        backend: common.backend,
        output_dir: common.output_dir.clone(),
    };
    let cfg = RunConfig::load(&common.config, &overrides)?;
    let dumped = cfg.dump()?;
    log::debug!("effective config -> {}", dumped.display());
    run(&cfg)
}
