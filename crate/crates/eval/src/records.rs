//! Benchmark records, one JSON object per line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use doclens_core::document::BBox;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate question id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldBox {
    pub page: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub question_id: String,
    /// Bundle directory, relative to the records file unless absolute.
    pub doc: PathBuf,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub evidence_pages: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_boxes: Option<Vec<GoldBox>>,
    /// Evidence-source tags such as TXT, LAY, CHA, TAB, FIG, UNA.
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default = "yes")]
    pub answerable: bool,
}

fn yes() -> bool {
    true
}

impl BenchmarkRecord {
    pub fn gold_pages(&self) -> BTreeSet<u32> {
        self.evidence_pages.iter().copied().collect()
    }

    pub fn resolve_doc(&self, base: &Path) -> PathBuf {
        if self.doc.is_absolute() {
            self.doc.clone()
        } else {
            base.join(&self.doc)
        }
    }
}

pub fn parse_records(raw: &str, origin: &str) -> Result<Vec<BenchmarkRecord>, RecordError> {
    let mut out: Vec<BenchmarkRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BenchmarkRecord = serde_json::from_str(line).map_err(|e| RecordError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.evidence_pages.contains(&0) {
            return Err(RecordError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: "evidence pages are 1-based".into(),
            });
        }
        if !seen.insert(rec.question_id.clone()) {
            return Err(RecordError::DuplicateId(rec.question_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<BenchmarkRecord>, RecordError> {
    let raw = std::fs::read_to_string(path)?;
    parse_records(&raw, &path.display().to_string())
}

pub fn to_jsonl(records: &[BenchmarkRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
