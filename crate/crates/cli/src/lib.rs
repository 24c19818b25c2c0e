//! Configuration-driven runner for the toy experiments built on `wgf-core`.
//!
//! `wgf-lab run <config>` resolves a TOML config over the experiment's
//! defaults, echoes the result to `resolved_config.toml` in the output
//! directory, then writes CSV data and SVG diagnostics next to it.

pub mod check;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod svg;

use std::path::PathBuf;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{CliError, Result};
use output::{Metrics, OutputDir};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub files: Vec<PathBuf>,
}

/// Echoes `cfg` and runs it into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write_text(RESOLVED_CONFIG, &cfg.to_toml()?)?;
    let metrics = experiments::run(cfg, &mut out)?;
    Ok(RunOutcome {
        metrics,
        files: out.written().to_vec(),
    })
}
