use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, ResultExt};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Files read, relative to the output directory unless absolute.
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

/// Artifacts of every stage run in one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// The config as run, so the pipeline can be replayed from here alone.
    pub config: serde_json::Value,
    pub versions: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, config: serde_json::Value) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("idaug".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("manifest_format".into(), "1".into());
        Self {
            config_hash,
            config,
            versions,
            stages: BTreeMap::new(),
        }
    }

    /// Loads `<out>/manifest.json`, starting afresh when it is missing or was
    /// written for a different config.
    pub fn open(
        out: &Path,
        config_hash: &str,
        config: serde_json::Value,
    ) -> Result<Self, CliError> {
        let path = out.join(MANIFEST_FILE);
        if path.exists() {
            let text = std::fs::read_to_string(&path).internal_err("manifest")?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::user("manifest", format!("{}: {e}", path.display())))?;
            if m.config_hash == config_hash {
                return Ok(m);
            }
            log::warn!("config changed since the last run; starting a new manifest");
        }
        Ok(Self::new(config_hash.into(), config))
    }

    pub fn record(&mut self, out: &Path, stage: &str, record: StageRecord) -> Result<(), CliError> {
        self.stages.insert(stage.into(), record);
        self.save(out)
    }

    pub fn save(&self, out: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).internal_err("manifest")?;
        std::fs::write(out.join(MANIFEST_FILE), text + "\n").internal_err("manifest")
    }
}
