//! Run manifests: one JSON document per command invocation recording the
//! fully resolved configuration, dataset provenance, produced artifacts, and
//! wall-clock duration. `milrank rerun --manifest <path>` re-executes the
//! recorded command; everything except the duration is deterministic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use milrank::{MilDataset, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataProvenance {
    pub paths: Vec<String>,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bags: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positives: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negatives: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
}

impl DataProvenance {
    pub fn of_dataset(paths: Vec<String>, dataset: &MilDataset) -> DataProvenance {
        DataProvenance {
            paths,
            source: dataset.source().to_string(),
            bags: Some(dataset.bags().len()),
            positives: Some(dataset.num_positive()),
            negatives: Some(dataset.num_negative()),
            feature_dim: Some(dataset.feature_dim()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// The fully resolved command configuration; `rerun` deserializes this.
    pub config: serde_json::Value,
    pub data: DataProvenance,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Manifest path for an artifact: `model.json` -> `model.manifest.json`.
pub fn manifest_path_for(artifact: &Path) -> std::path::PathBuf {
    artifact.with_extension("manifest.json")
}
