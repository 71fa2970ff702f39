//! Answer sampling over an evidence set and adjudication of the candidates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{Document, DocumentError};
use crate::gateway::{CallRecord, Gateway, GatewayError, ImageData, ModelRequest, Part};
use crate::localizer::EvidenceSet;
use crate::navigator::{ocr_part_text, page_label};
use crate::parse::{extract_object, text_field, ParseError};
use crate::prompts::{ADJUDICATOR, ANSWER_SAMPLER};

pub const ZOOM_DELIMITER: &str = "---- Zoomed-in Figures and Charts of this page ----";

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("all {0} answer candidates were unparseable")]
    AllCandidatesUnparseable(usize),
    #[error("adjudicator response unparseable: {0}")]
    UnparseableResponse(ParseError),
    #[error("adjudication needs at least one candidate")]
    NoCandidates,
    #[error("invalid reasoner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Document(#[from] DocumentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerConfig {
    pub t_a: u32,
    pub temperature: f64,
    pub adjudicator_temperature: f64,
    /// Skip the adjudicator call when every candidate answer is identical.
    pub unanimity_short_circuit: bool,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            t_a: 8,
            temperature: 0.7,
            adjudicator_temperature: 0.0,
            unanimity_short_circuit: true,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<(), ReasoningError> {
        if self.t_a == 0 {
            return Err(ReasoningError::Config("t_a must be >= 1".into()));
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("adjudicator_temperature", self.adjudicator_temperature),
        ] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(ReasoningError::Config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    /// 1-based position in the sampler's candidate list.
    pub sample_index: u32,
    pub reasoning: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCandidate {
    pub sample_index: u32,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub candidates: Vec<CandidateAnswer>,
    pub raw: Vec<RawCandidate>,
    pub call: CallRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjudication {
    pub meta_analysis: String,
    pub final_answer: String,
    pub candidates: Vec<CandidateAnswer>,
    pub short_circuited: bool,
    /// Whether `final_answer` is byte-identical to some candidate's answer.
    pub matches_candidate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call: Option<CallRecord>,
}

/// Parses the two-field `{analysis, prediction}` contract; both must be
/// non-empty.
pub fn parse_answer_response(raw: &str) -> Result<(String, String), ParseError> {
    let map = extract_object(raw)?;
    let analysis = text_field(&map, "analysis")?;
    let prediction = text_field(&map, "prediction")?;
    if analysis.trim().is_empty() {
        return Err(ParseError::EmptyField("analysis"));
    }
    if prediction.trim().is_empty() {
        return Err(ParseError::EmptyField("prediction"));
    }
    Ok((analysis, prediction))
}

pub fn question_part_text(question: &str) -> String {
    format!("Question: {question}")
}

/// Per item: page image, then the zoom delimiter and crops when there are
/// any, then the OCR text. The question comes last.
pub fn build_sampler_request(
    doc: &Document,
    evidence: &EvidenceSet,
    cfg: &ReasonerConfig,
) -> Result<ModelRequest, ReasoningError> {
    let mut parts = Vec::new();
    for item in &evidence.items {
        let page = doc.get_page(i64::from(item.page_index))?;
        let image = ImageData::from_encoded(doc.read_image_bytes(page)?, page.image_mime())?
            .with_label(page_label(item.page_index));
        parts.push(Part::Image(image));
        if !item.crops.is_empty() {
            parts.push(Part::text(ZOOM_DELIMITER));
            for crop in &item.crops {
                let image = ImageData::from_encoded(crop.png.clone(), "image/png")?
                    .with_label(crop.caption.clone());
                parts.push(Part::Image(image));
            }
        }
        if let Some(text) = &item.text {
            parts.push(Part::Text(ocr_part_text(item.page_index, text)));
        }
    }
    parts.push(Part::Text(question_part_text(&evidence.question)));
    Ok(ModelRequest {
        system_prompt: ANSWER_SAMPLER.text.to_string(),
        parts,
        temperature: cfg.temperature,
        candidate_count: cfg.t_a,
    })
}

/// Parses raw sampler outputs, dropping malformed ones. Survivors keep their
/// original 1-based positions.
pub fn parse_candidates(raw: &[String]) -> (Vec<CandidateAnswer>, Vec<RawCandidate>) {
    let mut candidates = Vec::new();
    let mut log = Vec::new();
    for (i, text) in raw.iter().enumerate() {
        let sample_index = i as u32 + 1;
        let error = match parse_answer_response(text) {
            Ok((reasoning, answer)) => {
                candidates.push(CandidateAnswer {
                    sample_index,
                    reasoning,
                    answer,
                });
                None
            }
            Err(e) => {
                tracing::warn!(sample = sample_index, "dropping malformed answer candidate: {e}");
                Some(e.to_string())
            }
        };
        log.push(RawCandidate {
            sample_index,
            raw: text.clone(),
            error,
        });
    }
    (candidates, log)
}

pub fn sample_answers(
    doc: &Document,
    evidence: &EvidenceSet,
    cfg: &ReasonerConfig,
    gw: &Gateway,
) -> Result<Sampling, ReasoningError> {
    cfg.validate()?;
    let req = build_sampler_request(doc, evidence, cfg)?;
    let resp = gw.complete(&req)?;
    let call = gw.record("sampling", &req, &resp);
    let (candidates, raw) = parse_candidates(&resp.candidates);
    if candidates.is_empty() {
        return Err(ReasoningError::AllCandidatesUnparseable(raw.len()));
    }
    Ok(Sampling {
        candidates,
        raw,
        call,
    })
}

pub fn build_adjudicator_input(question: &str, candidates: &[CandidateAnswer]) -> String {
    let mut out = format!("**Question:**\n{question}\n\n**List of Agent Analyses and Answers:**\n");
    for (i, c) in candidates.iter().enumerate() {
        out.push_str(&format!(
            "Agent {}\nAnalysis: {}\nAnswer: {}\n",
            i + 1,
            c.reasoning,
            c.answer
        ));
    }
    out
}

pub fn build_adjudicator_request(
    question: &str,
    candidates: &[CandidateAnswer],
    cfg: &ReasonerConfig,
) -> ModelRequest {
    ModelRequest {
        system_prompt: ADJUDICATOR.text.to_string(),
        parts: vec![Part::Text(build_adjudicator_input(question, candidates))],
        temperature: cfg.adjudicator_temperature,
        candidate_count: 1,
    }
}

pub fn adjudicate(
    question: &str,
    candidates: &[CandidateAnswer],
    cfg: &ReasonerConfig,
    gw: &Gateway,
) -> Result<Adjudication, ReasoningError> {
    let first = candidates.first().ok_or(ReasoningError::NoCandidates)?;
    let unanimous = candidates.iter().all(|c| c.answer == first.answer);
    if candidates.len() == 1 || (cfg.unanimity_short_circuit && unanimous) {
        return Ok(Adjudication {
            meta_analysis: String::new(),
            final_answer: first.answer.clone(),
            candidates: candidates.to_vec(),
            short_circuited: true,
            matches_candidate: true,
            raw: None,
            call: None,
        });
    }
    let req = build_adjudicator_request(question, candidates, cfg);
    let resp = gw.complete(&req)?;
    let call = gw.record("adjudication", &req, &resp);
    let raw = resp
        .candidates
        .into_iter()
        .next()
        .ok_or(ReasoningError::UnparseableResponse(ParseError::UnparseableResponse))?;
    let (meta_analysis, final_answer) =
        parse_answer_response(&raw).map_err(ReasoningError::UnparseableResponse)?;
    let matches_candidate = candidates.iter().any(|c| c.answer == final_answer);
    Ok(Adjudication {
        meta_analysis,
        final_answer,
        candidates: candidates.to_vec(),
        short_circuited: false,
        matches_candidate,
        raw: Some(raw),
        call: Some(call),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::load_document;
    use crate::fixtures::{write_bundle_fixture, FixturePage};
    use crate::gateway::{fingerprint, GatewayConfig, InflightLimiter, MockBackend, MockScript};
    use crate::localizer::{localize, EvidenceItem};
    use crate::navigator::PageTexts;
    use crate::tools::{ParsingTools, ToolBackendConfig};
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn ans(analysis: &str, prediction: &str) -> String {
        serde_json::json!({"analysis": analysis, "prediction": prediction}).to_string()
    }

    fn cand(i: u32, a: &str) -> CandidateAnswer {
        CandidateAnswer {
            sample_index: i,
            reasoning: format!("r{i}"),
            answer: a.into(),
        }
    }

    fn gw(script: MockScript) -> (Arc<MockBackend>, Gateway) {
        let mock = Arc::new(MockBackend::new(script));
        let cfg = GatewayConfig {
            retry_base_delay_ms: 0,
            ..GatewayConfig::default()
        };
        (mock.clone(), Gateway::new(mock, cfg, Arc::new(InflightLimiter::new(4))))
    }

    fn fixture() -> (tempfile::TempDir, Document, EvidenceSet) {
        let dir = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(2);
        pages[0].elements = vec![("chart", [0.0, 0.0, 60.0, 40.0]), ("table", [0.0, 80.0, 100.0, 120.0])];
        write_bundle_fixture(dir.path(), "r", &pages);
        let doc = load_document(dir.path()).unwrap();
        let texts: PageTexts = doc
            .pages()
            .iter()
            .map(|p| (p.index, p.ocr_text.clone().unwrap()))
            .collect();
        let tools = ParsingTools::new(ToolBackendConfig {
            cache_dir: dir.path().join("cache"),
            ..Default::default()
        })
        .unwrap();
        let ev = localize(&doc, "What?", &BTreeSet::from([1, 2]), &texts, &tools, 2).unwrap();
        (dir, doc, ev)
    }

    #[test]
    fn sampler_part_order() {
        let (_d, doc, ev) = fixture();
        let one = EvidenceSet {
            question: "What?".into(),
            items: vec![ev.items[0].clone()],
        };
        let req = build_sampler_request(&doc, &one, &ReasonerConfig::default()).unwrap();
        assert_eq!(req.parts.len(), 6);
        assert!(req.parts[0].is_image());
        assert_eq!(req.parts[1].as_text(), Some(ZOOM_DELIMITER));
        assert!(req.parts[2].is_image() && req.parts[3].is_image());
        assert!(req.parts[4].as_text().unwrap().starts_with("Page 1 OCR text:"));
        assert_eq!(req.parts[5].as_text(), Some("Question: What?"));
        assert_eq!(req.system_prompt, ANSWER_SAMPLER.text);
        match &req.parts[2] {
            Part::Image(img) => {
                assert_eq!(img.label.as_deref(), Some("Page 1, chart 1"));
                assert_eq!((img.width, img.height), (60, 40));
            }
            Part::Text(_) => unreachable!(),
        }

        let plain = EvidenceSet {
            question: "What?".into(),
            items: vec![ev.items[1].clone()],
        };
        let req = build_sampler_request(&doc, &plain, &ReasonerConfig::default()).unwrap();
        assert_eq!(req.parts.len(), 3);

        let empty = EvidenceSet {
            question: "What?".into(),
            items: vec![],
        };
        let req = build_sampler_request(&doc, &empty, &ReasonerConfig::default()).unwrap();
        assert_eq!(req.parts, vec![Part::text("Question: What?")]);
    }

    #[test]
    fn no_text_item_skips_ocr_part() {
        let (_d, doc, _) = fixture();
        let ev = EvidenceSet {
            question: "q".into(),
            items: vec![EvidenceItem {
                page_index: 2,
                text: None,
                crops: vec![],
                failures: vec![],
            }],
        };
        let req = build_sampler_request(&doc, &ev, &ReasonerConfig::default()).unwrap();
        assert_eq!(req.parts.len(), 2);
    }

    #[test]
    fn answer_contract_variants() {
        assert_eq!(
            parse_answer_response(&ans("a", "b")).unwrap(),
            ("a".to_string(), "b".to_string())
        );
        let fenced = format!("```json\n{}\n```", ans("a", "b"));
        assert_eq!(parse_answer_response(&fenced).unwrap().1, "b");
        assert_eq!(
            parse_answer_response(r#"{"analysis":"a","prediction":""}"#),
            Err(ParseError::EmptyField("prediction"))
        );
        assert_eq!(
            parse_answer_response(r#"{"analysis":"a"}"#),
            Err(ParseError::MissingField("prediction"))
        );
        assert_eq!(parse_answer_response(r#"{"analysis":"a","prediction":7}"#).unwrap().1, "7");
    }

    #[test]
    fn sampling_keeps_order_and_drops_malformed() {
        let (_d, doc, ev) = fixture();
        let cfg = ReasonerConfig { t_a: 3, ..Default::default() };
        let req = build_sampler_request(&doc, &ev, &cfg).unwrap();
        let mut script = MockScript::default();
        script.push(
            fingerprint(&req),
            vec![vec![ans("x", "12"), "oops".into(), ans("y", "Not answerable")]],
        );
        let (_m, g) = gw(script);
        let s = sample_answers(&doc, &ev, &cfg, &g).unwrap();
        assert_eq!(s.candidates.len(), 2);
        assert_eq!(s.candidates[0].sample_index, 1);
        assert_eq!(s.candidates[1].sample_index, 3);
        assert_eq!(s.candidates[1].answer, "Not answerable");
        assert!(s.raw[1].error.is_some());
        assert_eq!(s.call.candidate_count, 3);
    }

    #[test]
    fn all_malformed_is_an_error() {
        let (_d, doc, ev) = fixture();
        let mut script = MockScript::default();
        script.push("*", vec![vec!["x".into(), "y".into()]]);
        let (_m, g) = gw(script);
        let cfg = ReasonerConfig { t_a: 2, ..Default::default() };
        assert!(matches!(
            sample_answers(&doc, &ev, &cfg, &g),
            Err(ReasoningError::AllCandidatesUnparseable(2))
        ));
    }

    #[test]
    fn adjudicator_input_format() {
        let text = build_adjudicator_input("Q?", &[cand(1, "a"), cand(2, "line1\nline2")]);
        assert_eq!(
            text,
            "**Question:**\nQ?\n\n**List of Agent Analyses and Answers:**\nAgent 1\nAnalysis: r1\nAnswer: a\nAgent 2\nAnalysis: r2\nAnswer: line1\nline2\n"
        );
        let req = build_adjudicator_request("Q?", &[cand(1, "a")], &ReasonerConfig::default());
        assert_eq!(req.image_count(), 0);
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.candidate_count, 1);
    }

    #[test]
    fn unanimous_and_single_short_circuit() {
        let (mock, g) = gw(MockScript::default());
        let cfg = ReasonerConfig::default();
        let a = adjudicate("q", &[cand(1, "14"), cand(2, "14")], &cfg, &g).unwrap();
        assert_eq!(a.final_answer, "14");
        assert!(a.short_circuited);
        let a = adjudicate("q", &[cand(4, "x")], &cfg, &g).unwrap();
        assert_eq!(a.final_answer, "x");
        assert!(mock.calls().is_empty());
        assert!(matches!(adjudicate("q", &[], &cfg, &g), Err(ReasoningError::NoCandidates)));
    }

    #[test]
    fn adjudicator_selects_candidate() {
        let cands = [cand(1, "12"), cand(2, "14")];
        let cfg = ReasonerConfig::default();
        let mut script = MockScript::default();
        script.push(
            fingerprint(&build_adjudicator_request("q", &cands, &cfg)),
            vec![vec![ans("agent 2 is right", "14")]],
        );
        let (mock, g) = gw(script);
        let a = adjudicate("q", &cands, &cfg, &g).unwrap();
        assert_eq!(a.final_answer, "14");
        assert!(a.matches_candidate);
        assert!(!a.short_circuited);
        assert_eq!(mock.calls().len(), 1);
    }

    #[test]
    fn short_circuit_can_be_disabled() {
        let cands = [cand(1, "14"), cand(2, "14")];
        let cfg = ReasonerConfig {
            unanimity_short_circuit: false,
            ..Default::default()
        };
        let mut script = MockScript::default();
        script.push("prompt:adjudicator", vec![vec![ans("m", "fourteen")]]);
        let (_m, g) = gw(script);
        let a = adjudicate("q", &cands, &cfg, &g).unwrap();
        assert_eq!(a.final_answer, "fourteen");
        assert!(!a.matches_candidate);
    }

    #[test]
    fn unparseable_adjudication() {
        let mut script = MockScript::default();
        script.push("prompt:adjudicator", vec![vec!["no".into()]]);
        let (_m, g) = gw(script);
        let err = adjudicate("q", &[cand(1, "a"), cand(2, "b")], &ReasonerConfig::default(), &g).unwrap_err();
        assert!(matches!(err, ReasoningError::UnparseableResponse(_)));
    }
}
