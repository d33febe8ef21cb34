//! Batch runs of the closed G2 Laplacian flow: configuration, orchestration
//! of flows and checks, persistence, and reports.

pub mod config;
pub mod report;
pub mod runner;
pub mod svg;

pub use config::{parse_config, parse_config_at, RunConfig};
pub use runner::{resume, run, verify, Outcome, RunError};

use std::path::Path;

/// Reads and parses a configuration file; relative paths inside it are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| config::ConfigError {
        violations: vec![format!("cannot read {}: {e}", path.display())],
    })?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Ok(parse_config_at(&text, base)?)
}
