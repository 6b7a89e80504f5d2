//! Config-driven orchestration for the `repalign` command.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
pub use run::{run_pipeline, Report, RunOutcome};

/// Loads, resolves and validates a config file.
pub fn prepare(path: &std::path::Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::from_file(path)?.resolve(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
