//! Benchmark runs under the ablation settings, persistence and recomputation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use doclens_core::document::{load_document, Document};
use doclens_core::gateway::InflightLimiter;
use doclens_core::par::map_ordered;
use doclens_core::pipeline::{Pipeline, PipelineError};
use doclens_core::store::{RunId, RunStore, StoreError};
use doclens_core::trace::{RunTrace, Stage, StageError};
use doclens_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::BenchmarkRecord;
use crate::report::{build_report, Report, ReportError};
use crate::scoring::{Judgment, ScoreMode, Scorer};

pub const JUDGMENTS_FILE: &str = "judgments.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const RUN_META_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("oracle-pages mode needs gold evidence pages; missing for {0}")]
    MissingGoldPages(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    NoLens,
    NoReasoning,
    NoSampling,
    NoOcr,
    OraclePages,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoLens,
        Ablation::NoReasoning,
        Ablation::NoSampling,
        Ablation::NoOcr,
        Ablation::OraclePages,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLens => "no-lens",
            Ablation::NoReasoning => "no-reasoning",
            Ablation::NoSampling => "no-sampling",
            Ablation::NoOcr => "no-ocr",
            Ablation::OraclePages => "oracle-pages",
        }
    }

    /// Sets the matching flag. Oracle pages are supplied per record.
    pub fn apply(self, cfg: &mut PipelineConfig) {
        let a = &mut cfg.ablations;
        match self {
            Ablation::Full | Ablation::OraclePages => {}
            Ablation::NoLens => a.no_lens = true,
            Ablation::NoReasoning => a.no_reasoning = true,
            Ablation::NoSampling => a.no_sampling = true,
            Ablation::NoOcr => a.no_ocr = true,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Directory that relative record `doc` paths resolve against.
    pub base_dir: PathBuf,
    pub parallelism: usize,
    pub scorer: Scorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: String,
    pub scoring: ScoreMode,
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub meta: RunMeta,
    pub traces: Vec<RunTrace>,
    pub judgments: BTreeMap<String, Judgment>,
    pub report: Report,
}

fn ingest_failure(record: &BenchmarkRecord, cfg: &PipelineConfig, message: String) -> RunTrace {
    let mut t = RunTrace::new(&record.question_id, "", &record.question, 0, cfg.snapshot());
    t.error = Some(StageError {
        stage: Stage::Ingest,
        message,
    });
    t
}

fn load_all(records: &[BenchmarkRecord], base: &Path) -> BTreeMap<PathBuf, Result<Document, String>> {
    let mut docs = BTreeMap::new();
    for r in records {
        let path = r.resolve_doc(base);
        docs.entry(path.clone())
            .or_insert_with(|| load_document(&path).map_err(|e| format!("{}: {e}", path.display())));
    }
    docs
}

/// Runs every record under `ablation`. Per-record failures are kept as
/// traces with an error and the run continues.
pub fn run_benchmark(
    records: &[BenchmarkRecord],
    base_cfg: &PipelineConfig,
    ablation: Ablation,
    opts: &BenchOptions,
) -> Result<BenchmarkRun, BenchError> {
    if ablation == Ablation::OraclePages {
        if let Some(r) = records.iter().find(|r| r.evidence_pages.is_empty() && r.answerable) {
            return Err(BenchError::MissingGoldPages(r.question_id.clone()));
        }
    }
    let mut cfg = base_cfg.clone();
    ablation.apply(&mut cfg);
    let limiter = Arc::new(InflightLimiter::new(cfg.max_inflight));
    let pipeline = Pipeline::with_limiter(cfg.clone(), limiter)?;
    let docs = load_all(records, &opts.base_dir);

    let traces: Vec<RunTrace> = map_ordered(records, opts.parallelism, |record| {
        let doc = match &docs[&record.resolve_doc(&opts.base_dir)] {
            Ok(d) => d,
            Err(msg) => return ingest_failure(record, &cfg, msg.clone()),
        };
        if let Some(bad) = record.evidence_pages.iter().find(|&&p| p > doc.page_count()) {
            return ingest_failure(
                record,
                &cfg,
                format!("gold page {bad} outside 1..={}", doc.page_count()),
            );
        }
        let gold: BTreeSet<u32> = record.gold_pages();
        let oracle = (ablation == Ablation::OraclePages).then_some(&gold);
        match pipeline.ask(doc, &record.question_id, &record.question, oracle, &()) {
            Ok(t) => t,
            Err(failure) => {
                tracing::warn!(question = %record.question_id, "{failure}");
                *failure.trace
            }
        }
    });

    let judgments = judge_all(records, &traces, &opts.scorer, opts.parallelism);
    let meta = RunMeta {
        mode: ablation.as_str().to_string(),
        scoring: opts.scorer.mode(),
    };
    let report = build_report(&meta.mode, records, &traces, &judgments, meta.scoring)?;
    Ok(BenchmarkRun {
        meta,
        traces,
        judgments,
        report,
    })
}

/// LLM-judge verdicts for every answered trace. Empty for exact matching,
/// which needs nothing stored.
pub fn judge_all(
    records: &[BenchmarkRecord],
    traces: &[RunTrace],
    scorer: &Scorer,
    parallelism: usize,
) -> BTreeMap<String, Judgment> {
    if scorer.mode() == ScoreMode::ExactNorm {
        return BTreeMap::new();
    }
    let pairs: Vec<(&BenchmarkRecord, &RunTrace)> = records.iter().zip(traces).collect();
    map_ordered(&pairs, parallelism, |(record, trace)| {
        let answer = trace.final_answer.as_ref()?;
        let judgment = scorer
            .score(&record.question, answer, &record.answer)
            .unwrap_or_else(|e| Judgment {
                score: 0.0,
                reasoning: Some(format!("judge failed: {e}")),
            });
        Some((record.question_id.clone(), judgment))
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Writes traces, judgments, run metadata and both report renderings.
pub fn persist_run(store: &RunStore, run_id: &RunId, run: &BenchmarkRun) -> Result<(), BenchError> {
    for t in &run.traces {
        store.save_trace(run_id, t)?;
    }
    let meta = serde_json::to_vec_pretty(&run.meta).expect("meta serializes");
    store.save_artifact(run_id, RUN_META_FILE, &meta)?;
    let judgments = serde_json::to_vec_pretty(&run.judgments).expect("judgments serialize");
    store.save_artifact(run_id, JUDGMENTS_FILE, &judgments)?;
    store.save_artifact(run_id, REPORT_JSON, run.report.to_json_pretty().as_bytes())?;
    store.save_artifact(run_id, REPORT_MD, run.report.to_markdown().as_bytes())?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BenchError> {
    let raw = std::fs::read_to_string(path).map_err(StoreError::from)?;
    serde_json::from_str(&raw).map_err(|e| BenchError::Meta(format!("{}: {e}", path.display())))
}

/// A record whose recomputed result differs from the stored report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub question_id: String,
    pub fields: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Recomputed {
    pub report: Report,
    /// Differences against the stored report, if one exists.
    pub discrepancies: Vec<Discrepancy>,
    pub identical: bool,
}

/// Rebuilds the report of a stored run from its traces alone.
pub fn recompute_from_trace(
    traces: &[RunTrace],
    records: &[BenchmarkRecord],
    meta: &RunMeta,
    judgments: &BTreeMap<String, Judgment>,
    original: Option<&Report>,
) -> Result<Recomputed, BenchError> {
    let report = build_report(&meta.mode, records, traces, judgments, meta.scoring)?;
    let discrepancies = original.map(|o| diff_reports(o, &report)).unwrap_or_default();
    let identical = original.is_none_or(|o| o.to_json_pretty() == report.to_json_pretty());
    Ok(Recomputed {
        report,
        discrepancies,
        identical,
    })
}

pub fn recompute_stored(store: &RunStore, run_id: &RunId, records: &[BenchmarkRecord]) -> Result<Recomputed, BenchError> {
    let traces = store.load_run(run_id)?;
    let dir = store.run_dir(run_id);
    let meta: RunMeta = read_json(&dir.join(RUN_META_FILE))?;
    let judgments: BTreeMap<String, Judgment> = read_json(&dir.join(JUDGMENTS_FILE))?;
    let original: Option<Report> = if dir.join(REPORT_JSON).is_file() {
        Some(read_json(&dir.join(REPORT_JSON))?)
    } else {
        None
    };
    recompute_from_trace(&traces, records, &meta, &judgments, original.as_ref())
}

pub fn diff_reports(a: &Report, b: &Report) -> Vec<Discrepancy> {
    let b_by_id: BTreeMap<&str, _> = b.records.iter().map(|r| (r.question_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for ra in &a.records {
        let Some(rb) = b_by_id.get(ra.question_id.as_str()) else {
            out.push(Discrepancy {
                question_id: ra.question_id.clone(),
                fields: vec!["missing".into()],
            });
            continue;
        };
        let mut fields = Vec::new();
        if ra.score != rb.score {
            fields.push("score".to_string());
        }
        if ra.retrieved_pages != rb.retrieved_pages {
            fields.push("retrieved_pages".to_string());
        }
        if ra.page_metrics != rb.page_metrics {
            fields.push("page_metrics".to_string());
        }
        if ra.element_metrics != rb.element_metrics {
            fields.push("element_metrics".to_string());
        }
        if ra.final_answer != rb.final_answer {
            fields.push("final_answer".to_string());
        }
        if !fields.is_empty() {
            out.push(Discrepancy {
                question_id: ra.question_id.clone(),
                fields,
            });
        }
    }
    out
}
