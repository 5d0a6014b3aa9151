//! Run manifest written next to experiment outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the config text and the replication count; also the `run`
    /// field of every record.
    pub config_hash: String,
    pub config_path: String,
    pub prng: String,
    pub versions: BTreeMap<String, String>,
    pub replications: usize,
    pub workers: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub outputs: Vec<OutputFile>,
}

pub fn config_hash(config_text: &str, replications: usize) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    h.update(format!("\nreplications={replications}\n").as_bytes());
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn now() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

impl RunManifest {
    pub fn start(config_path: &Path, hash: String, replications: usize, workers: usize) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("ddc-core".to_string(), ddc_core::VERSION.to_string());
        versions.insert("ddc-harness".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            config_hash: hash,
            config_path: config_path.display().to_string(),
            prng: ddc_core::rng::GENERATOR_ID.to_string(),
            versions,
            replications,
            workers,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            outputs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::io(path, e.into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::io(path, e.into()))?;
        std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_text_and_count() {
        let a = config_hash("x", 10);
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash("x", 10));
        assert_ne!(a, config_hash("x", 11));
        assert_ne!(a, config_hash("y", 10));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(FILE_NAME);
        let m = RunManifest::start(Path::new("c.toml"), config_hash("x", 2), 2, 1);
        m.save(&p).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
    }
}
