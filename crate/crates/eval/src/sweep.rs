//! Sample-count sweeps over one maximal run by prefix truncation.

use std::collections::BTreeMap;

use doclens_core::gateway::Gateway;
use doclens_core::reasoning::{adjudicate, ReasonerConfig, ReasoningError};
use doclens_core::trace::RunTrace;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::page_metrics;
use crate::records::BenchmarkRecord;
use crate::report::{mean, mean_prf, pair_traces, trace_score, MeanPrf, ReportError};
use crate::scoring::{Judgment, ScoreError, ScoreMode, Scorer};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep values must be ascending, non-empty and >= 1")]
    BadValues,
    #[error("value {value} exceeds the {available} samples recorded for {question_id}")]
    BeyondRun {
        value: u32,
        available: usize,
        question_id: String,
    },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Te,
    Ta,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "te" | "t_e" => Ok(SweepParam::Te),
            "ta" | "t_a" => Ok(SweepParam::Ta),
            other => Err(format!("unknown sweep parameter {other:?} (te, ta)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<MeanPrf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_pages: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_of_n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudicated: Option<f64>,
}

pub struct SweepInputs<'a> {
    pub records: &'a [BenchmarkRecord],
    pub traces: &'a [RunTrace],
    pub judgments: &'a BTreeMap<String, Judgment>,
    pub scoring: ScoreMode,
    pub scorer: &'a Scorer,
    /// Needed to adjudicate candidate prefixes shorter than the full run.
    pub adjudicator: Option<(&'a Gateway, &'a ReasonerConfig)>,
}

fn check_values(values: &[u32]) -> Result<(), SweepError> {
    if values.is_empty() || values[0] == 0 || values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SweepError::BadValues);
    }
    Ok(())
}

pub fn sweep(inputs: &SweepInputs<'_>, param: SweepParam, values: &[u32]) -> Result<Vec<SweepPoint>, SweepError> {
    check_values(values)?;
    let pairs = pair_traces(inputs.records, inputs.traces)?;
    match param {
        SweepParam::Te => sweep_te(&pairs, values),
        SweepParam::Ta => sweep_ta(inputs, &pairs, values),
    }
}

fn sweep_te(pairs: &[(&BenchmarkRecord, &RunTrace)], values: &[u32]) -> Result<Vec<SweepPoint>, SweepError> {
    let max = *values.last().expect("non-empty");
    for (record, trace) in pairs {
        if let Some(nav) = &trace.navigation {
            // Oracle navigation records a single sample standing for all of them.
            let oracle = nav.calls.is_empty();
            if !oracle && nav.samples.len() < max as usize {
                return Err(SweepError::BeyondRun {
                    value: max,
                    available: nav.samples.len(),
                    question_id: record.question_id.clone(),
                });
            }
        }
    }
    Ok(values
        .iter()
        .map(|&k| {
            let per: Vec<_> = pairs
                .iter()
                .map(|(record, trace)| {
                    let pages = trace
                        .navigation
                        .as_ref()
                        .map(|n| n.prefix_union(k as usize))
                        .unwrap_or_default();
                    (pages.len(), page_metrics(&pages, &record.gold_pages()))
                })
                .collect();
            SweepPoint {
                value: k,
                page: Some(mean_prf(per.iter().map(|(_, m)| m))),
                mean_pages: Some(mean(per.iter().map(|(n, _)| *n as f64))),
                best_of_n: None,
                adjudicated: None,
            }
        })
        .collect())
}

fn sweep_ta(
    inputs: &SweepInputs<'_>,
    pairs: &[(&BenchmarkRecord, &RunTrace)],
    values: &[u32],
) -> Result<Vec<SweepPoint>, SweepError> {
    let max = *values.last().expect("non-empty");
    for (record, trace) in pairs {
        if let Some(s) = &trace.sampling {
            if s.raw.len() < max as usize {
                return Err(SweepError::BeyondRun {
                    value: max,
                    available: s.raw.len(),
                    question_id: record.question_id.clone(),
                });
            }
        }
    }
    // Per-record, per-candidate scores, computed once.
    let mut candidate_scores: Vec<Vec<(u32, f64)>> = Vec::new();
    for (record, trace) in pairs {
        let mut scores = Vec::new();
        if let Some(s) = &trace.sampling {
            for c in &s.candidates {
                let j = inputs.scorer.score(&record.question, &c.answer, &record.answer)?;
                scores.push((c.sample_index, j.score));
            }
        }
        candidate_scores.push(scores);
    }

    let mut points = Vec::new();
    for &k in values {
        let best: Vec<f64> = candidate_scores
            .iter()
            .map(|scores| {
                scores
                    .iter()
                    .filter(|(i, _)| *i <= k)
                    .map(|(_, s)| *s)
                    .fold(0.0, f64::max)
            })
            .collect();
        let adjudicated = if k == max {
            let mut v = Vec::new();
            for (record, trace) in pairs {
                v.push(trace_score(trace, record, inputs.judgments, inputs.scoring)?);
            }
            Some(mean(v))
        } else if let Some((gw, cfg)) = inputs.adjudicator {
            let mut v = Vec::new();
            for (record, trace) in pairs {
                v.push(prefix_adjudicated_score(inputs.scorer, record, trace, k, gw, cfg)?);
            }
            Some(mean(v))
        } else {
            None
        };
        points.push(SweepPoint {
            value: k,
            page: None,
            mean_pages: None,
            best_of_n: Some(mean(best)),
            adjudicated,
        });
    }
    Ok(points)
}

fn prefix_adjudicated_score(
    scorer: &Scorer,
    record: &BenchmarkRecord,
    trace: &RunTrace,
    k: u32,
    gw: &Gateway,
    cfg: &ReasonerConfig,
) -> Result<f64, SweepError> {
    let Some(s) = &trace.sampling else {
        return Ok(0.0);
    };
    let prefix: Vec<_> = s.candidates.iter().filter(|c| c.sample_index <= k).cloned().collect();
    if prefix.is_empty() {
        return Ok(0.0);
    }
    let adj = adjudicate(&record.question, &prefix, cfg, gw)?;
    Ok(scorer.score(&record.question, &adj.final_answer, &record.answer)?.score)
}
