//! Stage-by-stage runner for the ehrsig pipeline.
//!
//! Each stage reads its inputs from a work directory, writes its artifacts
//! atomically and records a `manifest.json` with input hashes, seeds and
//! output hashes. A stage whose inputs and parameters are unchanged is
//! skipped on rerun.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

use std::path::PathBuf;

use clap::Parser;

use crate::config::{Overrides, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::stages::{Context, Outcome, Stage};

#[derive(Debug, Parser)]
#[command(name = "ehrsig", version, about = "Latent source discovery and evaluation over event logs")]
pub struct Cli {
    /// Stage to run; `pipeline` runs ingest through diagram.
    #[arg(value_enum)]
    pub stage: Stage,

    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Base seed, overriding the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Work directory, overriding `paths.work_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolve the configuration for a command line: defaults, then the file,
/// then flags.
pub fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&Overrides { seed: cli.seed, out: cli.out.clone() });
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<Vec<(Stage, Outcome)>> {
    let cfg = resolve_config(cli)?;
    if cli.jobs == Some(0) {
        return Err(CliError::Config { field: "--jobs".into(), msg: "must be at least 1".into() });
    }
    let ctx = Context::new(cfg);
    match cli.jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Other(e.to_string()))?;
            pool.install(|| stages::run(cli.stage, &ctx))
        }
        None => stages::run(cli.stage, &ctx),
    }
}
