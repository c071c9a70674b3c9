//! One JSON document per (reviewer, case):
//!
//! ```text
//! <data_dir>/assessments/<reviewer>/<case>.json
//! <data_dir>/assessments/<reviewer>/history/<case>.v<n>.json
//! ```
//!
//! Writes go to a temporary file in the same directory and are renamed into
//! place, so a reader sees either the old or the new document.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::assessment::Assessment;
use crate::store::{check_id, StoreError};

#[derive(Debug, Error)]
pub enum PersistError {
    #[error(transparent)]
    Id(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("stored assessment is corrupt: {0}")]
    Corrupt(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAssessment {
    #[serde(flatten)]
    pub assessment: Assessment,
    /// 1 for the first submission, incremented on each resubmission.
    pub version: u32,
    pub stored_at: String,
}

#[derive(Debug)]
pub struct AssessmentStore {
    root: PathBuf,
    locks: Mutex<HashMap<(String, String), Arc<tokio::sync::Mutex<()>>>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("assessment paths have a parent");
    std::fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl AssessmentStore {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        AssessmentStore {
            root: data_dir.into().join("assessments"),
            locks: Mutex::new(HashMap::new()),
        }
    }

    fn path(&self, reviewer: &str, case: &str) -> Result<PathBuf, PersistError> {
        check_id(reviewer)?;
        check_id(case)?;
        Ok(self.root.join(reviewer).join(format!("{case}.json")))
    }

    pub fn history_path(&self, reviewer: &str, case: &str, version: u32) -> PathBuf {
        self.root
            .join(reviewer)
            .join("history")
            .join(format!("{case}.v{version}.json"))
    }

    fn lock_for(&self, reviewer: &str, case: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry((reviewer.to_string(), case.to_string()))
            .or_default()
            .clone()
    }

    pub fn load(&self, reviewer: &str, case: &str) -> Result<Option<StoredAssessment>, PersistError> {
        let path = self.path(reviewer, case)?;
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Stores a validated assessment. An existing document is first copied to
    /// the history directory under its own version number.
    pub async fn save(&self, assessment: Assessment) -> Result<StoredAssessment, PersistError> {
        let (reviewer, case) = (assessment.reviewer_id.clone(), assessment.case_id.clone());
        let path = self.path(&reviewer, &case)?;
        let lock = self.lock_for(&reviewer, &case);
        let _guard = lock.lock().await;

        let version = match std::fs::read(&path) {
            Ok(bytes) => {
                let prev: StoredAssessment = serde_json::from_slice(&bytes)?;
                write_atomic(&self.history_path(&reviewer, &case, prev.version), &bytes)?;
                prev.version + 1
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 1,
            Err(e) => return Err(e.into()),
        };
        let stored = StoredAssessment {
            assessment,
            version,
            stored_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        write_atomic(&path, &serde_json::to_vec_pretty(&stored)?)?;
        Ok(stored)
    }

    /// Case ids this reviewer has submitted.
    pub fn reviewed_cases(&self, reviewer: &str) -> Result<Vec<String>, PersistError> {
        check_id(reviewer)?;
        let dir = self.root.join(reviewer);
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let name = entry?.file_name();
            if let Some(case) = name.to_str().and_then(|n| n.strip_suffix(".json")) {
                if check_id(case).is_ok() {
                    out.push(case.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
