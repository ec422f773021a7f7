//! Command-line surface of the featsharp toolkit: configuration, dataset
//! ingestion, PCA visualization and the subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod pca;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use featsharp::upsampler::UpsamplerKind;

#[derive(Debug, Parser)]
#[command(name = "featsharp", version, about = "Feature upsampling with tile-guided refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub upsampler: Option<UpsamplerKind>,
    /// Upsample factor z.
    #[arg(long, global = true)]
    pub factor: Option<usize>,
    /// Checkpoint for `eval` and `upsample` (overrides the config).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an upsampler and write `checkpoint.fskp` and `losses.csv`.
    Train,
    /// Evaluate a checkpoint and write `metrics.csv` and `metrics.json`.
    Eval,
    /// Render PCA images of every upsampling path for one image.
    Upsample,
    /// Tiled versus brute-force featurization error per tile level.
    TilingError,
    /// Cost table, inequality check and optional throughput benchmark.
    Cost,
    /// Finite-difference check of every learnable parameter.
    Gradcheck,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(p) => config::RunConfig::load(p)?,
        None => config::RunConfig::default(),
    };
    config.apply_overrides(cli.seed, cli.upsampler, cli.factor);
    if cli.checkpoint.is_some() {
        config.checkpoint = cli.checkpoint.clone();
    }
    let ctx = commands::RunContext::new(config, cli.out)?;
    match cli.command {
        Command::Train => commands::cmd_train(&ctx),
        Command::Eval => commands::cmd_eval(&ctx).map(|_| ()),
        Command::Upsample => commands::cmd_upsample(&ctx),
        Command::TilingError => commands::cmd_tiling_error(&ctx).map(|_| ()),
        Command::Cost => commands::cmd_cost(&ctx),
        Command::Gradcheck => commands::cmd_gradcheck(&ctx),
    }
}

/// Worker count from `FEATSHARP_THREADS`, when set to a positive integer.
pub fn thread_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var("FEATSHARP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => anyhow::bail!("FEATSHARP_THREADS must be a positive integer, got '{v}'"),
        },
        Err(_) => Ok(None),
    }
}
