//! Per-question run trace. Traces carry no timestamps or machine-local
//! paths, so a mock-backed run serializes to identical bytes every time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{CallRecord, MockScript, Usage};
use crate::localizer::EvidenceSet;
use crate::navigator::NavigationResult;
use crate::reasoning::{Adjudication, Sampling};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Loading the document bundle; only appears on failures.
    Ingest,
    Navigation,
    Localization,
    Sampling,
    Adjudication,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Navigation,
        Stage::Localization,
        Stage::Sampling,
        Stage::Adjudication,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Navigation => "navigation",
            Stage::Localization => "localization",
            Stage::Sampling => "sampling",
            Stage::Adjudication => "adjudication",
        }
    }

    /// Run status while this stage is in progress.
    pub fn running_status(self) -> &'static str {
        match self {
            Stage::Ingest => "loading",
            Stage::Navigation => "navigating",
            Stage::Localization => "localizing",
            Stage::Sampling => "sampling",
            Stage::Adjudication => "adjudicating",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Started,
    Completed,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Free-form note, e.g. why a stage was skipped or how it was replaced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub format_version: u32,
    pub question_id: String,
    pub doc_id: String,
    pub question: String,
    pub page_count: u32,
    pub config: Value,
    pub stages: Vec<StageRecord>,
    /// Pages whose OCR text was unavailable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ocr_missing: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub navigation: Option<NavigationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<EvidenceSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<Sampling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudication: Option<Adjudication>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
}

impl RunTrace {
    pub fn new(question_id: &str, doc_id: &str, question: &str, page_count: u32, config: Value) -> Self {
        RunTrace {
            format_version: TRACE_FORMAT_VERSION,
            question_id: question_id.to_string(),
            doc_id: doc_id.to_string(),
            question: question.to_string(),
            page_count,
            config,
            stages: Vec::new(),
            ocr_missing: Vec::new(),
            navigation: None,
            evidence: None,
            sampling: None,
            adjudication: None,
            final_answer: None,
            usage: Usage::default(),
            error: None,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(raw)
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none() && self.final_answer.is_some()
    }

    pub fn stage_status(&self, stage: Stage) -> Option<StageStatus> {
        self.stages
            .iter()
            .rev()
            .find(|r| r.stage == stage)
            .map(|r| r.status)
    }

    pub fn calls(&self) -> Vec<&CallRecord> {
        let mut out: Vec<&CallRecord> = Vec::new();
        if let Some(n) = &self.navigation {
            out.extend(n.calls.iter());
        }
        if let Some(s) = &self.sampling {
            out.push(&s.call);
        }
        if let Some(c) = self.adjudication.as_ref().and_then(|a| a.call.as_ref()) {
            out.push(c);
        }
        out
    }

    pub fn recompute_usage(&mut self) {
        let mut total = Usage::default();
        for c in self.calls() {
            if let Some(u) = c.usage {
                total += u;
            }
        }
        self.usage = total;
    }

    /// Raw model outputs keyed by request fingerprint, in call order.
    pub fn responses(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        if let Some(nav) = &self.navigation {
            for (call, chunk) in nav.calls.iter().zip(&nav.chunks) {
                let raws = nav
                    .raw
                    .iter()
                    .filter(|s| s.chunk == *chunk)
                    .map(|s| s.raw.clone());
                out.entry(call.fingerprint.clone()).or_default().extend(raws);
            }
        }
        if let Some(s) = &self.sampling {
            out.entry(s.call.fingerprint.clone())
                .or_default()
                .extend(s.raw.iter().map(|r| r.raw.clone()));
        }
        if let Some(a) = &self.adjudication {
            if let (Some(call), Some(raw)) = (&a.call, &a.raw) {
                out.entry(call.fingerprint.clone()).or_default().push(raw.clone());
            }
        }
        out
    }

    /// A mock script that answers the same requests with the same outputs.
    pub fn to_mock_script(traces: &[RunTrace]) -> MockScript {
        let mut script = MockScript::default();
        for t in traces {
            for (fp, candidates) in t.responses() {
                script.push(fp, vec![candidates]);
            }
        }
        script
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names() {
        assert_eq!(Stage::Navigation.running_status(), "navigating");
        assert_eq!(serde_json::to_string(&Stage::Adjudication).unwrap(), "\"adjudication\"");
        assert_eq!(serde_json::to_string(&StageStatus::Skipped).unwrap(), "\"skipped\"");
    }

    #[test]
    fn empty_trace_round_trips() {
        let t = RunTrace::new("q1", "d", "Q?", 5, serde_json::json!({"a": 1}));
        let back = RunTrace::from_json(&t.to_json_pretty()).unwrap();
        assert_eq!(back, t);
        assert!(!t.is_complete());
        assert!(t.calls().is_empty());
    }
}
