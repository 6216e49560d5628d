use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::VERSION;

/// Writes `manifest.json` with the full run config, so every setting that
/// affects results is recorded.
pub fn write(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    outcome: &Result<Value, CliError>,
) -> Result<(), CliError> {
    let (status, metrics, error) = match outcome {
        Ok(m) => ("ok", m.clone(), Value::Null),
        Err(e) => ("failed", Value::Null, Value::String(e.to_string())),
    };
    let manifest = json!({
        "command": command,
        "version": VERSION,
        "status": status,
        "error": error,
        "config": cfg,
        "metrics": metrics,
    });
    fs::create_dir_all(dir).map_err(CliError::runtime)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(CliError::runtime)?;
    fs::write(dir.join("manifest.json"), text + "\n").map_err(CliError::runtime)
}

/// Runs `body`, then records its outcome in the manifest either way.
pub fn run_recorded(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    body: impl FnOnce() -> Result<Value, CliError>,
) -> Result<(), CliError> {
    let outcome = body();
    write(dir, command, cfg, &outcome)?;
    println!("{}", dir.join("manifest.json").display());
    outcome.map(|_| ())
}
