//! On-disk run persistence: `runs/{run_id}/traces/{question_id}.json` traces,
//! run-level artifacts beside the `traces` directory, and content-addressed
//! `blobs/{fingerprint}.json` model outputs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::trace::RunTrace;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("invalid run id {0:?}")]
    InvalidRunId(String),
    #[error("invalid question id {0:?}")]
    InvalidQuestionId(String),
    #[error("trace {path}: {source}")]
    Corrupt {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Run identifier: UTC timestamp to the millisecond plus random suffix, so
/// lexical order is creation order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RunId(String);

impl RunId {
    pub fn generate() -> Self {
        let ts = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
        let suffix: u32 = rand::rng().random();
        RunId(format!("{ts}-{suffix:08x}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for RunId {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if is_safe_name(s) {
            Ok(RunId(s.to_string()))
        } else {
            Err(StoreError::InvalidRunId(s.to_string()))
        }
    }
}

impl TryFrom<String> for RunId {
    type Error = StoreError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RunId> for String {
    fn from(id: RunId) -> String {
        id.0
    }
}

fn is_safe_name(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Blob {
    fingerprint: String,
    candidates: Vec<String>,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run: &RunId) -> PathBuf {
        self.root.join("runs").join(run.as_str())
    }

    pub fn trace_path(&self, run: &RunId, question_id: &str) -> Result<PathBuf, StoreError> {
        if !is_safe_name(question_id) {
            return Err(StoreError::InvalidQuestionId(question_id.to_string()));
        }
        Ok(self.run_dir(run).join("traces").join(format!("{question_id}.json")))
    }

    /// Writes the trace and its model-output blobs.
    pub fn save_trace(&self, run: &RunId, trace: &RunTrace) -> Result<PathBuf, StoreError> {
        let path = self.trace_path(run, &trace.question_id)?;
        write_atomic(&path, trace.to_json_pretty().as_bytes())?;
        for (fingerprint, candidates) in trace.responses() {
            let blob_path = self.root.join("blobs").join(format!("{fingerprint}.json"));
            if blob_path.exists() {
                continue;
            }
            let blob = Blob {
                fingerprint,
                candidates,
            };
            let json = serde_json::to_vec_pretty(&blob).expect("blob serializes");
            write_atomic(&blob_path, &json)?;
        }
        Ok(path)
    }

    pub fn load_trace(&self, run: &RunId, question_id: &str) -> Result<RunTrace, StoreError> {
        let path = self.trace_path(run, question_id)?;
        let raw = std::fs::read_to_string(&path)?;
        RunTrace::from_json(&raw).map_err(|source| StoreError::Corrupt {
            path: path.display().to_string(),
            source,
        })
    }

    /// Every trace of a run, sorted by question id.
    pub fn load_run(&self, run: &RunId) -> Result<Vec<RunTrace>, StoreError> {
        let dir = self.run_dir(run);
        if !dir.is_dir() {
            return Err(StoreError::UnknownRun(run.to_string()));
        }
        let traces = dir.join("traces");
        if !traces.is_dir() {
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = std::fs::read_dir(&traces)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter_map(|n| n.strip_suffix(".json").map(str::to_string))
            .collect();
        names.sort();
        names.iter().map(|n| self.load_trace(run, n)).collect()
    }

    /// Writes an auxiliary file (report, records copy) into the run directory.
    pub fn save_artifact(&self, run: &RunId, name: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        if !is_safe_name(name) || name == "traces" {
            return Err(StoreError::InvalidQuestionId(name.to_string()));
        }
        let path = self.run_dir(run).join(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    pub fn list_runs(&self) -> Result<Vec<RunId>, StoreError> {
        let dir = self.root.join("runs");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<RunId> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter_map(|n| n.parse().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }
}
