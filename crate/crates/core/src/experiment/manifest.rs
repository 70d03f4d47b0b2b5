use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Hash of the inputs the stage was run on; used to skip reruns.
    pub input_hash: String,
    /// Files written by the stage, relative to the run directory.
    pub artifacts: Vec<String>,
    pub seconds: f64,
    pub messages: Vec<String>,
}

/// Index of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub crate_version: String,
    pub formats: BTreeMap<String, u32>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        let formats = [
            ("checkpoint".to_string(), crate::model::CHECKPOINT_VERSION),
            ("feature_cache".to_string(), crate::cache::FORMAT_VERSION),
            ("report_columns".to_string(), crate::probe::REPORT_COLUMNS.len() as u32),
        ]
        .into_iter()
        .collect();
        RunManifest { config_hash: config_hash.to_string(), crate_version: env!("CARGO_PKG_VERSION").to_string(), formats, stages: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Every artifact recorded by any stage.
    pub fn artifacts(&self) -> Vec<&str> {
        self.stages.values().flat_map(|s| s.artifacts.iter().map(String::as_str)).collect()
    }
}
