//! Experiment manifests: every output directory carries enough provenance to
//! re-execute the run bit-identically.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "experiment.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub created_unix: u64,
    /// SHA-256 of the resolved configuration JSON, so reports are
    /// self-describing.
    pub config_hash: String,
    pub dataset_seed: u64,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub modes: Vec<String>,
    /// The resolved configuration itself, for re-execution.
    pub config: serde_json::Value,
}

impl ExperimentManifest {
    pub fn new(dataset_seed: u64, modes: Vec<String>, config: serde_json::Value) -> Self {
        ExperimentManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_hash: hash_config(&config),
            dataset_seed,
            checkpoint_hashes: BTreeMap::new(),
            modes,
            config,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(MANIFEST_NAME),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ExperimentManifest> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "experiment manifest {}",
                path.display()
            )));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
    }
}

/// Canonical config hash: serde_json serialization of the value (object keys
/// ordered by construction in this codebase), SHA-256, hex.
pub fn hash_config(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(&bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
