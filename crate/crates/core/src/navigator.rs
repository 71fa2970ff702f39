//! Page navigation: prompt the model with the question and interleaved page
//! images and OCR text, sample `t_e` candidates per chunk, and take the union
//! of every located page set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{Document, DocumentError};
use crate::gateway::{CallRecord, Gateway, GatewayError, ImageData, ModelRequest, Part};
use crate::par::map_ordered;
use crate::parse::{extract_object, text_field, ParseError};
use crate::prompts::PAGE_NAVIGATOR;

/// OCR text per page index. Pages without an entry contribute no text part.
pub type PageTexts = BTreeMap<u32, String>;

#[derive(Debug, Error)]
pub enum NavigatorError {
    #[error("navigation failed: {0}")]
    NavigationFailed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error("invalid navigator configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavigatorConfig {
    pub t_e: u32,
    pub temperature: f64,
    pub chunk_size: u32,
    /// Re-run in chunks of `chunk_size` if the whole-document request
    /// exceeds the backend's context.
    pub auto_chunk: bool,
    /// Always chunk, even when the whole document would fit.
    pub force_chunking: bool,
    pub max_parallel_chunks: usize,
}

impl Default for NavigatorConfig {
    fn default() -> Self {
        NavigatorConfig {
            t_e: 8,
            temperature: 0.7,
            chunk_size: 50,
            auto_chunk: true,
            force_chunking: false,
            max_parallel_chunks: 4,
        }
    }
}

impl NavigatorConfig {
    pub fn validate(&self) -> Result<(), NavigatorError> {
        if self.t_e == 0 {
            return Err(NavigatorError::Config("t_e must be >= 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(NavigatorError::Config("chunk_size must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(NavigatorError::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Inclusive, 1-based range of page indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PageRange {
    pub start: u32,
    pub end: u32,
}

impl PageRange {
    pub fn new(start: u32, end: u32) -> Self {
        debug_assert!(1 <= start && start <= end);
        PageRange { start, end }
    }

    pub fn len(&self) -> u32 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: u32) -> bool {
        (self.start..=self.end).contains(&index)
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<u32> {
        self.start..=self.end
    }
}

/// Splits `1..=n_pages` into contiguous ranges of `k` pages; only the last
/// may be shorter.
pub fn chunk_pages(n_pages: u32, k: u32) -> Vec<PageRange> {
    assert!(n_pages >= 1 && k >= 1, "chunk_pages needs n_pages >= 1 and k >= 1");
    (0..n_pages.div_ceil(k))
        .map(|c| PageRange::new(c * k + 1, ((c + 1) * k).min(n_pages)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigatorParse {
    pub analysis: String,
    pub located_pages: BTreeSet<u32>,
    /// Recorded for audit only; answers come from the reasoning stage.
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Parses the three-field navigator contract. `located_pages` is a string
/// such as `"[3, 10, 12]"`; a JSON array is accepted too. Indices outside
/// `1..=n` are dropped with a warning.
pub fn parse_navigator_response(raw: &str, n: u32) -> Result<NavigatorParse, ParseError> {
    let map = extract_object(raw)?;
    let analysis = text_field(&map, "analysis")?;
    let prediction = text_field(&map, "prediction")?;
    let mut warnings = Vec::new();
    let tokens: Vec<String> = match map.get("located_pages") {
        None | Some(serde_json::Value::Null) => {
            return Err(ParseError::MissingField("located_pages"))
        }
        Some(serde_json::Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect(),
        Some(serde_json::Value::String(s)) => split_list(s),
        Some(other) => split_list(&other.to_string()),
    };
    let mut located_pages = BTreeSet::new();
    for token in tokens {
        for page in parse_page_token(&token, n, &mut warnings) {
            located_pages.insert(page);
        }
    }
    Ok(NavigatorParse {
        analysis,
        located_pages,
        prediction,
        warnings,
    })
}

fn split_list(s: &str) -> Vec<String> {
    s.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|t| t.trim().trim_matches(|c| c == '"' || c == '\'').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn parse_page_token(token: &str, n: u32, warnings: &mut Vec<String>) -> Vec<u32> {
    let in_range = |v: i64, warnings: &mut Vec<String>| -> Option<u32> {
        if v >= 1 && v <= i64::from(n) {
            Some(v as u32)
        } else {
            warnings.push(format!("page {v} outside 1..={n} dropped"));
            None
        }
    };
    let t = token.trim();
    if let Ok(v) = t.parse::<i64>() {
        return in_range(v, warnings).into_iter().collect();
    }
    if let Ok(f) = t.parse::<f64>() {
        if f.fract() == 0.0 && f.is_finite() {
            return in_range(f as i64, warnings).into_iter().collect();
        }
    }
    if let Some((a, b)) = t.split_once('-') {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<i64>(), b.trim().parse::<i64>()) {
            if a <= b {
                let lo = a.max(1);
                let hi = b.min(i64::from(n));
                if lo > a || hi < b {
                    warnings.push(format!("range {a}-{b} clipped to 1..={n}"));
                }
                return (lo..=hi).map(|v| v as u32).collect();
            }
        }
    }
    warnings.push(format!("unrecognized page token {t:?} ignored"));
    Vec::new()
}

/// Question text part. It states the absolute page-index range of the pages
/// that follow, so located pages stay document-global when chunking.
pub fn navigator_question_text(question: &str, range: PageRange, page_count: u32) -> String {
    format!(
        "Question: {question}\n\nThe document has {page_count} pages. The pages provided below are page indices {} to {}. Report located_pages using these indices.",
        range.start, range.end
    )
}

pub fn page_label(index: u32) -> String {
    format!("Page {index}")
}

pub fn ocr_part_text(index: u32, text: &str) -> String {
    format!("Page {index} OCR text:\n{text}")
}

/// Question first, then per page in ascending order: the page image, then its
/// OCR text when present in `texts`.
pub fn build_navigator_request(
    doc: &Document,
    texts: &PageTexts,
    question: &str,
    range: PageRange,
    cfg: &NavigatorConfig,
) -> Result<ModelRequest, NavigatorError> {
    let mut parts = Vec::with_capacity(1 + 2 * range.len() as usize);
    parts.push(Part::Text(navigator_question_text(
        question,
        range,
        doc.page_count(),
    )));
    for index in range.iter() {
        let page = doc.get_page(i64::from(index))?;
        let bytes = doc.read_image_bytes(page)?;
        let image = ImageData::from_encoded(bytes, page.image_mime())?.with_label(page_label(index));
        parts.push(Part::Image(image));
        if let Some(text) = texts.get(&index) {
            parts.push(Part::Text(ocr_part_text(index, text)));
        }
    }
    Ok(ModelRequest {
        system_prompt: PAGE_NAVIGATOR.text.to_string(),
        parts,
        temperature: cfg.temperature,
        candidate_count: cfg.t_e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigatorSample {
    pub chunk: PageRange,
    /// 1-based sample index within the chunk's candidate list.
    pub sample_index: u32,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse: Option<NavigatorParse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationResult {
    pub e_pred: Vec<u32>,
    /// Page set of sample j (union over chunks), j = 1..t_e.
    pub samples: Vec<Vec<u32>>,
    pub chunks: Vec<PageRange>,
    pub raw: Vec<NavigatorSample>,
    pub calls: Vec<CallRecord>,
    #[serde(default)]
    pub chunked_after_context_limit: bool,
}

impl NavigationResult {
    /// Union of the first `k` samples.
    pub fn prefix_union(&self, k: usize) -> BTreeSet<u32> {
        self.samples.iter().take(k).flatten().copied().collect()
    }

    /// Builds a result that did not come from model sampling (oracle pages).
    pub fn from_pages(pages: impl IntoIterator<Item = u32>) -> Self {
        let set: BTreeSet<u32> = pages.into_iter().collect();
        let e_pred: Vec<u32> = set.into_iter().collect();
        NavigationResult {
            samples: vec![e_pred.clone()],
            e_pred,
            chunks: Vec::new(),
            raw: Vec::new(),
            calls: Vec::new(),
            chunked_after_context_limit: false,
        }
    }
}

struct ChunkOutcome {
    range: PageRange,
    candidates: Vec<String>,
    call: CallRecord,
}

fn run_chunks(
    doc: &Document,
    texts: &PageTexts,
    question: &str,
    ranges: &[PageRange],
    cfg: &NavigatorConfig,
    gw: &Gateway,
) -> Result<Vec<ChunkOutcome>, NavigatorError> {
    let results = map_ordered(ranges, cfg.max_parallel_chunks, |range| {
        let req = build_navigator_request(doc, texts, question, *range, cfg)?;
        let resp = gw.complete(&req)?;
        let call = gw.record("navigation", &req, &resp);
        Ok::<_, NavigatorError>(ChunkOutcome {
            range: *range,
            candidates: resp.candidates,
            call,
        })
    });
    results.into_iter().collect()
}

/// Runs navigation and merges every (chunk, sample) page set.
pub fn navigate(
    doc: &Document,
    texts: &PageTexts,
    question: &str,
    cfg: &NavigatorConfig,
    gw: &Gateway,
) -> Result<NavigationResult, NavigatorError> {
    cfg.validate()?;
    let n = doc.page_count();
    let whole = vec![PageRange::new(1, n)];
    let chunked = chunk_pages(n, cfg.chunk_size);
    let mut fell_back = false;

    let outcomes = if cfg.force_chunking {
        run_chunks(doc, texts, question, &chunked, cfg, gw)?
    } else {
        match run_chunks(doc, texts, question, &whole, cfg, gw) {
            Err(NavigatorError::Gateway(GatewayError::ContextLimitExceeded(msg)))
                if cfg.auto_chunk && chunked.len() > 1 =>
            {
                tracing::warn!("context limit on whole document ({msg}); chunking by {}", cfg.chunk_size);
                fell_back = true;
                run_chunks(doc, texts, question, &chunked, cfg, gw)?
            }
            other => other?,
        }
    };

    let t_e = cfg.t_e as usize;
    let mut samples: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); t_e];
    let mut raw = Vec::new();
    let mut calls = Vec::new();
    let mut parsed_any = false;
    for outcome in outcomes {
        for (j, text) in outcome.candidates.into_iter().enumerate() {
            match parse_navigator_response(&text, n) {
                Ok(parse) => {
                    parsed_any = true;
                    for w in &parse.warnings {
                        tracing::warn!(chunk = ?outcome.range, sample = j + 1, "{w}");
                    }
                    samples[j].extend(parse.located_pages.iter().copied());
                    raw.push(NavigatorSample {
                        chunk: outcome.range,
                        sample_index: j as u32 + 1,
                        raw: text,
                        parse: Some(parse),
                        error: None,
                    });
                }
                Err(e) => {
                    tracing::warn!(chunk = ?outcome.range, sample = j + 1, "unparseable navigator response: {e}");
                    raw.push(NavigatorSample {
                        chunk: outcome.range,
                        sample_index: j as u32 + 1,
                        raw: text,
                        parse: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        calls.push(outcome.call);
    }
    if !parsed_any {
        return Err(NavigatorError::NavigationFailed(
            "no navigator candidate could be parsed".into(),
        ));
    }

    let e_pred: BTreeSet<u32> = samples.iter().flatten().copied().collect();
    Ok(NavigationResult {
        e_pred: e_pred.into_iter().collect(),
        samples: samples.into_iter().map(|s| s.into_iter().collect()).collect(),
        chunks: if fell_back || cfg.force_chunking { chunked } else { whole },
        raw,
        calls,
        chunked_after_context_limit: fell_back,
    })
}
