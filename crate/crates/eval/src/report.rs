//! Benchmark reports built purely from records, traces and stored judgments.

use std::collections::{BTreeMap, BTreeSet};

use doclens_core::document::BBox;
use doclens_core::trace::RunTrace;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{match_elements, page_metrics, PageMetrics, PrfCounts, DEFAULT_IOU_THRESHOLD};
use crate::records::BenchmarkRecord;
use crate::scoring::{exact_norm, Judgment, ScoreMode};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("trace for {question_id} is incomplete: {reason}")]
    TraceIncomplete { question_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceAccuracy {
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub question_id: String,
    pub sources: Vec<String>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    pub retrieved_pages: Vec<u32>,
    pub page_metrics: PageMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_metrics: Option<PrfCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudicator_matches_candidate: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub scoring: ScoreMode,
    pub n_records: usize,
    pub n_errors: usize,
    pub accuracy: f64,
    pub per_source: BTreeMap<String, SourceAccuracy>,
    pub mean_retrieved_pages: f64,
    pub page: MeanPrf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<PrfCounts>,
    /// Share of adjudicated answers that repeat some candidate verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudicator_membership_rate: Option<f64>,
    pub records: Vec<RecordResult>,
}

impl Report {
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("## {} ({} records, {} errors)\n\n", self.mode, self.n_records, self.n_errors);
        let sources: Vec<&String> = self.per_source.keys().collect();
        out.push_str("| ");
        for s in &sources {
            out.push_str(&format!("{s} | "));
        }
        out.push_str("ALL |\n|");
        for _ in 0..=sources.len() {
            out.push_str("---|");
        }
        out.push_str("\n| ");
        for s in &sources {
            out.push_str(&format!("{:.1} | ", 100.0 * self.per_source[*s].accuracy));
        }
        out.push_str(&format!("{:.1} |\n\n", 100.0 * self.accuracy));
        out.push_str("| #Pages | Page P | Page R | Page F1 |");
        if self.element.is_some() {
            out.push_str(" Elem P | Elem R | Elem F1 |");
        }
        out.push_str("\n|---|---|---|---|");
        if self.element.is_some() {
            out.push_str("---|---|---|");
        }
        out.push_str(&format!(
            "\n| {:.2} | {:.1} | {:.1} | {:.1} |",
            self.mean_retrieved_pages,
            100.0 * self.page.precision,
            100.0 * self.page.recall,
            100.0 * self.page.f1
        ));
        if let Some(e) = &self.element {
            out.push_str(&format!(
                " {:.1} | {:.1} | {:.1} |",
                100.0 * e.precision,
                100.0 * e.recall,
                100.0 * e.f1
            ));
        }
        out.push('\n');
        out
    }
}

/// Arithmetic mean accumulated in iteration order; 0.0 for no values.
pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn mean_prf<'a>(items: impl IntoIterator<Item = &'a PageMetrics> + Clone) -> MeanPrf {
    MeanPrf {
        precision: mean(items.clone().into_iter().map(|m| m.precision)),
        recall: mean(items.clone().into_iter().map(|m| m.recall)),
        f1: mean(items.into_iter().map(|m| m.f1)),
    }
}

/// Pages a trace retrieved: the evidence pages if localization ran, else the
/// navigator's prediction, else none.
pub fn retrieved_pages(trace: &RunTrace) -> BTreeSet<u32> {
    if let Some(ev) = &trace.evidence {
        return ev.items.iter().map(|i| i.page_index).collect();
    }
    trace
        .navigation
        .as_ref()
        .map(|n| n.e_pred.iter().copied().collect())
        .unwrap_or_default()
}

/// Element-level counts: predicted crops matched against gold boxes page by page.
pub fn element_counts(trace: &RunTrace, record: &BenchmarkRecord) -> Option<PrfCounts> {
    let gold = record.evidence_boxes.as_ref()?;
    let mut by_page: BTreeMap<u32, (Vec<BBox>, Vec<BBox>)> = BTreeMap::new();
    for g in gold {
        by_page.entry(g.page).or_default().1.push(g.bbox);
    }
    if let Some(ev) = &trace.evidence {
        for item in &ev.items {
            for c in &item.crops {
                by_page.entry(item.page_index).or_default().0.push(c.element.bbox);
            }
        }
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, gt) in by_page.values() {
        let m = match_elements(pred, gt, DEFAULT_IOU_THRESHOLD).metrics;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
    }
    Some(PrfCounts::from_counts(tp, fp, fn_))
}

/// Score of one trace. Failed runs score 0.
pub fn trace_score(
    trace: &RunTrace,
    record: &BenchmarkRecord,
    judgments: &BTreeMap<String, Judgment>,
    scoring: ScoreMode,
) -> Result<f64, ReportError> {
    let Some(answer) = &trace.final_answer else {
        if trace.error.is_none() {
            return Err(ReportError::TraceIncomplete {
                question_id: record.question_id.clone(),
                reason: "no final answer and no recorded error".into(),
            });
        }
        return Ok(0.0);
    };
    match scoring {
        ScoreMode::ExactNorm => Ok(exact_norm(answer, &record.answer)),
        ScoreMode::LlmJudge => judgments
            .get(&record.question_id)
            .map(|j| j.score)
            .ok_or_else(|| ReportError::TraceIncomplete {
                question_id: record.question_id.clone(),
                reason: "no stored judgment".into(),
            }),
    }
}

/// Pairs each record with its trace, sorted by question id.
pub fn pair_traces<'a>(
    records: &'a [BenchmarkRecord],
    traces: &'a [RunTrace],
) -> Result<Vec<(&'a BenchmarkRecord, &'a RunTrace)>, ReportError> {
    let by_id: BTreeMap<&str, &RunTrace> = traces.iter().map(|t| (t.question_id.as_str(), t)).collect();
    let mut sorted: Vec<&BenchmarkRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    sorted
        .into_iter()
        .map(|r| {
            by_id
                .get(r.question_id.as_str())
                .map(|t| (r, *t))
                .ok_or_else(|| ReportError::TraceIncomplete {
                    question_id: r.question_id.clone(),
                    reason: "no trace".into(),
                })
        })
        .collect()
}

pub fn build_report(
    mode: &str,
    records: &[BenchmarkRecord],
    traces: &[RunTrace],
    judgments: &BTreeMap<String, Judgment>,
    scoring: ScoreMode,
) -> Result<Report, ReportError> {
    let mut results = Vec::new();
    for (record, trace) in pair_traces(records, traces)? {
        let retrieved = retrieved_pages(trace);
        results.push(RecordResult {
            question_id: record.question_id.clone(),
            sources: record.sources.clone(),
            score: trace_score(trace, record, judgments, scoring)?,
            final_answer: trace.final_answer.clone(),
            page_metrics: page_metrics(&retrieved, &record.gold_pages()),
            retrieved_pages: retrieved.into_iter().collect(),
            element_metrics: element_counts(trace, record),
            adjudicator_matches_candidate: trace
                .adjudication
                .as_ref()
                .filter(|a| !a.short_circuited)
                .map(|a| a.matches_candidate),
            error: trace.error.as_ref().map(|e| format!("{}: {}", e.stage, e.message)),
        });
    }

    let mut per_source_scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &results {
        for s in &r.sources {
            per_source_scores.entry(s.clone()).or_default().push(r.score);
        }
    }
    let per_source = per_source_scores
        .into_iter()
        .map(|(k, v)| {
            (
                k,
                SourceAccuracy {
                    count: v.len(),
                    accuracy: mean(v),
                },
            )
        })
        .collect();

    let element = {
        let with_gold: Vec<&PrfCounts> = results.iter().filter_map(|r| r.element_metrics.as_ref()).collect();
        (!with_gold.is_empty()).then(|| {
            let tp = with_gold.iter().map(|m| m.tp).sum();
            let fp = with_gold.iter().map(|m| m.fp).sum();
            let fn_ = with_gold.iter().map(|m| m.fn_).sum();
            PrfCounts::from_counts(tp, fp, fn_)
        })
    };
    let membership: Vec<f64> = results
        .iter()
        .filter_map(|r| r.adjudicator_matches_candidate)
        .map(|m| if m { 1.0 } else { 0.0 })
        .collect();

    Ok(Report {
        mode: mode.to_string(),
        scoring,
        n_records: results.len(),
        n_errors: results.iter().filter(|r| r.error.is_some()).count(),
        accuracy: mean(results.iter().map(|r| r.score)),
        per_source,
        mean_retrieved_pages: mean(results.iter().map(|r| r.retrieved_pages.len() as f64)),
        page: mean_prf(results.iter().map(|r| &r.page_metrics)),
        element,
        adjudicator_membership_rate: (!membership.is_empty()).then(|| mean(membership)),
        records: results,
    })
}
