//! `run_manifest.json`: everything needed to repeat a run, one entry per
//! command run in the output directory. It is the only output that carries
//! a timestamp.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Serialize)]
struct Versions {
    bstep: &'static str,
    bstep_core: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    exit_status: u8,
    config_hash: String,
    seed: u64,
    versions: Versions,
    timestamp: String,
    outputs: &'a [String],
    config: &'a RunConfig,
}

pub fn write(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    outputs: &[String],
    exit_status: u8,
) -> Result<(), CliError> {
    let m = Manifest {
        command,
        exit_status,
        config_hash: config.hash(),
        seed: config.mcmc.seed,
        versions: Versions {
            bstep: env!("CARGO_PKG_VERSION"),
            bstep_core: bstep_core::VERSION,
        },
        timestamp: chrono::Utc::now().to_rfc3339(),
        outputs,
        config,
    };
    let path = dir.join("run_manifest.json");
    let mut entries: serde_json::Map<String, serde_json::Value> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    entries.insert(
        command.to_string(),
        serde_json::to_value(&m).expect("manifest serializes"),
    );
    let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}
