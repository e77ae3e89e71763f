//! Run manifests: every pipeline output gets an adjacent JSON manifest
//! recording the command, its full configuration, input file hashes, the
//! tool version and the seed, so a run can be reproduced byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let now = unix_now();
        RunManifest {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            tool_version: TOOL_VERSION.to_string(),
            seed,
            started_unix_s: now,
            finished_unix_s: now,
        }
    }

    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs
            .insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Write `<artifact>.manifest.json` atomically next to the artifact.
    pub fn write_for(&mut self, artifact: &Path) -> Result<PathBuf> {
        self.finished_unix_s = unix_now();
        let path = manifest_path(artifact);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self).unwrap())
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "artifact".to_string());
    artifact.with_file_name(format!("{name}.manifest.json"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
