use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one invocation, written next to its outputs.
///
/// Everything except `created_unix` is a pure function of the flags and inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub artifact_version: &'static str,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<&'static str, PathBuf>,
    pub outputs: BTreeMap<&'static str, PathBuf>,
    pub config: Value,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(subcommand: &'static str, seed: Option<u64>, config: Value) -> Self {
        Self {
            subcommand,
            artifact_version: env!("CARGO_PKG_VERSION"),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(mut self, key: &'static str, path: &Path) -> Self {
        self.inputs.insert(key, path.to_path_buf());
        self
    }

    pub fn output(mut self, key: &'static str, path: &Path) -> Self {
        self.outputs.insert(key, path.to_path_buf());
        self
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }
}
