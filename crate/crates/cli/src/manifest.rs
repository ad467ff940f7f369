//! Run manifests: what ran, with which settings, and what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Resolved settings under their flag names; feeding them back through
    /// `--config` repeats the run.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of each output file, hex encoded.
    pub hashes: BTreeMap<String, String>,
    pub exit_code: i32,
    pub error: Option<String>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: BTreeMap::new(),
            seed: None,
            started_unix: now(),
            finished_unix: 0.0,
            outputs: Vec::new(),
            hashes: BTreeMap::new(),
            exit_code: 0,
            error: None,
        }
    }

    /// Hashes every output that exists, stamps the end time and writes JSON.
    pub fn finish(mut self, path: &Path, exit_code: i32, error: Option<String>) -> std::io::Result<()> {
        self.exit_code = exit_code;
        self.error = error;
        self.finished_unix = now();
        for out in &self.outputs {
            if out.is_file() {
                self.hashes.insert(out.display().to_string(), sha256_file(out)?);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(
            path,
            serde_json::to_string_pretty(&self).expect("manifest serialises") + "\n",
        )
    }
}
