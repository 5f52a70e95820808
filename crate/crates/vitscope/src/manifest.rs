//! Per-command run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{write_json, ENGINE_VERSION};
use crate::error::Result;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Everything needed to rerun a command: replaying `config` through
/// `--config` reproduces the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub engine_version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            engine_version: ENGINE_VERSION.into(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }
}
