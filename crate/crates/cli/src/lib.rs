//! Command-line pipeline: simulate, cluster, fit, diagnose, regulate, report.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

pub use commands::{cmd_cluster, cmd_fit, cmd_qq, cmd_regulate, cmd_report, cmd_simulate, run_all};
pub use config::RunConfig;
pub use error::{CliError, ErrorKind};

/// Loads a config and applies the seed and output-directory overrides.
pub fn load_config(path: &std::path::Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}
