use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl OutputFile {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(OutputFile {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(std::fs::read(path)?)),
        })
    }
}

/// Outcome for one unit of work (a case, a framework, a covariate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<OutputFile>,
}

impl ItemRecord {
    pub fn ok(id: impl Into<String>) -> Self {
        ItemRecord {
            id: id.into(),
            status: ItemStatus::Ok,
            errors: vec![],
            warnings: vec![],
            outputs: vec![],
        }
    }

    pub fn failed(id: impl Into<String>, errors: Vec<String>) -> Self {
        ItemRecord {
            status: ItemStatus::Failed,
            errors,
            ..ItemRecord::ok(id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub jobs: usize,
    pub started_at: String,
    pub finished_at: String,
    pub items: Vec<ItemRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn n_failed(&self) -> usize {
        self.items.iter().filter(|i| i.status == ItemStatus::Failed).count()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("manifest serializes"))
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
