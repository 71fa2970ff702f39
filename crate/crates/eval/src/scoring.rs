//! Answer scoring: normalized exact match or an LLM judge.

use doclens_core::gateway::{Gateway, GatewayError, ModelRequest, Part};
use doclens_core::parse::extract_object;
use doclens_core::prompts::{ANSWER_EXTRACTION, ANSWER_JUDGE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("judge response unparseable: {0}")]
    JudgeUnparseable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    ExactNorm,
    LlmJudge,
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact_norm" => Ok(ScoreMode::ExactNorm),
            "llm_judge" => Ok(ScoreMode::LlmJudge),
            other => Err(format!("unknown scoring mode {other:?} (exact_norm, llm_judge)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

/// Lowercases, trims, collapses whitespace, drops trailing periods and
/// treats "%" and "percent" after a number as noise.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase().replace('%', " percent ");
    let mut out = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let trimmed = out.trim_end_matches('.').trim_end().to_string();
        let stripped = match trimmed.strip_suffix("percent") {
            Some(head) if head.trim_end().parse::<f64>().is_ok() => head.trim_end().to_string(),
            _ => trimmed,
        };
        if stripped == out {
            return out;
        }
        out = stripped;
    }
}

pub fn exact_norm(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

pub fn judge_input(question: &str, gold: &str, pred: &str) -> String {
    format!("Question: {question}\nGround Truth: {gold}\nPrediction: {pred}")
}

pub fn build_judge_request(question: &str, gold: &str, pred: &str) -> ModelRequest {
    ModelRequest {
        system_prompt: ANSWER_JUDGE.text.to_string(),
        parts: vec![Part::Text(judge_input(question, gold, pred))],
        temperature: 0.0,
        candidate_count: 1,
    }
}

/// Parses `{score, reasoning}`. Scores must be 0 or 1 (numbers or numeric
/// strings).
pub fn parse_judgment(raw: &str) -> Result<Judgment, ScoreError> {
    let map = extract_object(raw).map_err(|e| ScoreError::JudgeUnparseable(e.to_string()))?;
    let score = match map.get("score") {
        Some(serde_json::Value::Number(n)) => n.as_f64(),
        Some(serde_json::Value::String(s)) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| ScoreError::JudgeUnparseable("missing numeric score".into()))?;
    if score != 0.0 && score != 1.0 {
        return Err(ScoreError::JudgeUnparseable(format!("score {score} is not 0 or 1")));
    }
    let reasoning = map
        .get("reasoning")
        .and_then(|v| v.as_str())
        .map(str::to_string);
    Ok(Judgment { score, reasoning })
}

pub fn build_extraction_request(question: &str, analysis: &str) -> ModelRequest {
    ModelRequest {
        system_prompt: ANSWER_EXTRACTION.text.to_string(),
        parts: vec![Part::Text(format!("Question: {question}\nAnalysis: {analysis}"))],
        temperature: 0.0,
        candidate_count: 1,
    }
}

/// Reads the `Extracted answer:` line of an extraction response.
pub fn parse_extracted_answer(raw: &str) -> Option<String> {
    raw.lines()
        .find_map(|l| l.trim().strip_prefix("Extracted answer:"))
        .map(|a| a.trim().to_string())
        .filter(|a| !a.is_empty())
}

#[derive(Debug, Clone)]
pub enum Scorer {
    ExactNorm,
    LlmJudge(Gateway),
}

impl Scorer {
    pub fn mode(&self) -> ScoreMode {
        match self {
            Scorer::ExactNorm => ScoreMode::ExactNorm,
            Scorer::LlmJudge(_) => ScoreMode::LlmJudge,
        }
    }

    pub fn score(&self, question: &str, pred: &str, gold: &str) -> Result<Judgment, ScoreError> {
        match self {
            Scorer::ExactNorm => Ok(Judgment {
                score: exact_norm(pred, gold),
                reasoning: None,
            }),
            Scorer::LlmJudge(gw) => {
                let resp = gw.complete(&build_judge_request(question, gold, pred))?;
                let raw = resp
                    .candidates
                    .first()
                    .ok_or_else(|| ScoreError::JudgeUnparseable("no candidates".into()))?;
                parse_judgment(raw)
            }
        }
    }
}
