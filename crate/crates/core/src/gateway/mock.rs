//! Scripted mock backend.
//!
//! A script maps request fingerprints to ordered rounds of candidates:
//!
//! ```json
//! {"entries": [{"fingerprint": "ab12...", "candidates_rounds": [["c1", "c2"], ["c3"]]}]}
//! ```
//!
//! Each fingerprint has its own cursor. A call asking for `n` candidates draws
//! up to `n` from the current round and moves to the next round once the
//! current one is used up. When no exact fingerprint matches, the entry keyed
//! `prompt:<template name>` for the request's system prompt is used, then `*`.
//!
//! Optional top-level fields simulate backend limits: `max_image_side`
//! (longer image side in px, above which calls fail as image-too-large),
//! `max_parts` (above which calls fail with a context-limit error) and
//! `transient_failures` (number of initial calls that fail transiently).

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{fingerprint, BackendError, BackendReply, ModelBackend, ModelRequest, Part, Usage};
use crate::prompts;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_side: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_parts: Option<usize>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub transient_failures: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub fingerprint: String,
    pub candidates_rounds: Vec<Vec<String>>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn push(&mut self, fingerprint: impl Into<String>, rounds: Vec<Vec<String>>) {
        let fingerprint = fingerprint.into();
        if let Some(e) = self.entries.iter_mut().find(|e| e.fingerprint == fingerprint) {
            e.candidates_rounds.extend(rounds);
        } else {
            self.entries.push(MockEntry {
                fingerprint,
                candidates_rounds: rounds,
            });
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("mock script serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCall {
    pub fingerprint: String,
    pub requested: u32,
    pub returned: usize,
}

#[derive(Debug, Default)]
struct Cursor {
    round: usize,
    offset: usize,
}

#[derive(Debug)]
pub struct MockBackend {
    name: String,
    script: MockScript,
    index: HashMap<String, usize>,
    cursors: Mutex<HashMap<String, Cursor>>,
    failures_left: AtomicU32,
    calls: Mutex<Vec<MockCall>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let index = script
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.fingerprint.clone(), i))
            .collect();
        MockBackend {
            name: "mock".into(),
            failures_left: AtomicU32::new(script.transient_failures),
            script,
            index,
            cursors: Mutex::new(HashMap::new()),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, std::io::Error> {
        Ok(Self::new(MockScript::load(path)?))
    }

    /// Every call the backend has answered, in order.
    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn resolve_key(&self, fp: &str, req: &ModelRequest) -> Option<String> {
        if self.index.contains_key(fp) {
            return Some(fp.to_string());
        }
        if let Some(name) = prompts::identify(&req.system_prompt) {
            let key = format!("prompt:{name}");
            if self.index.contains_key(&key) {
                return Some(key);
            }
        }
        self.index.contains_key("*").then(|| "*".to_string())
    }
}

/// Rough, deterministic token estimate used for mock usage accounting.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

const TOKENS_PER_IMAGE: u64 = 258;

impl ModelBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, req: &ModelRequest, n: u32) -> Result<BackendReply, BackendError> {
        if self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1))
            .is_ok()
        {
            return Err(BackendError::Transient("scripted transient failure".into()));
        }
        if let Some(limit) = self.script.max_image_side {
            let too_big = req.parts.iter().any(|p| match p {
                Part::Image(img) => img.width.max(img.height) > limit,
                Part::Text(_) => false,
            });
            if too_big {
                return Err(BackendError::ImageTooLarge(format!(
                    "image exceeds {limit}px on its longer side"
                )));
            }
        }
        if let Some(limit) = self.script.max_parts {
            if req.parts.len() > limit {
                return Err(BackendError::ContextLimit(format!(
                    "{} parts exceed the {limit}-part context",
                    req.parts.len()
                )));
            }
        }

        let fp = fingerprint(req);
        let key = self
            .resolve_key(&fp, req)
            .ok_or_else(|| BackendError::Fatal(format!("no scripted response for {fp}")))?;
        let rounds = &self.script.entries[self.index[&key]].candidates_rounds;

        let drawn: Vec<String> = {
            let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
            let cursor = cursors.entry(key.clone()).or_default();
            while cursor.round < rounds.len() && cursor.offset >= rounds[cursor.round].len() {
                cursor.round += 1;
                cursor.offset = 0;
            }
            let Some(round) = rounds.get(cursor.round) else {
                return Err(BackendError::Fatal(format!("mock script exhausted for {key}")));
            };
            let end = (cursor.offset + n as usize).min(round.len());
            let out = round[cursor.offset..end].to_vec();
            cursor.offset = end;
            out
        };

        self.calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(MockCall {
                fingerprint: fp,
                requested: n,
                returned: drawn.len(),
            });

        let input_tokens = estimate_tokens(&req.system_prompt)
            + req
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => estimate_tokens(t),
                    Part::Image(_) => TOKENS_PER_IMAGE,
                })
                .sum::<u64>();
        let output_tokens = drawn.iter().map(|c| estimate_tokens(c)).sum();
        Ok(BackendReply {
            candidates: drawn,
            usage: Some(Usage {
                input_tokens,
                output_tokens,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> ModelRequest {
        ModelRequest {
            system_prompt: "s".into(),
            parts: vec![Part::text(text)],
            temperature: 0.7,
            candidate_count: 3,
        }
    }

    #[test]
    fn rounds_advance_per_fingerprint() {
        let r = req("q");
        let mut script = MockScript::default();
        script.push(
            fingerprint(&r),
            vec![vec!["a".into(), "b".into()], vec!["c".into()]],
        );
        let mock = MockBackend::new(script);
        assert_eq!(mock.generate(&r, 2).unwrap().candidates, vec!["a", "b"]);
        assert_eq!(mock.generate(&r, 2).unwrap().candidates, vec!["c"]);
        assert!(matches!(mock.generate(&r, 1), Err(BackendError::Fatal(_))));
    }

    #[test]
    fn single_draws_walk_through_a_round() {
        let r = req("q");
        let mut script = MockScript::default();
        script.push(fingerprint(&r), vec![vec!["a".into(), "b".into()]]);
        let mock = MockBackend::new(script);
        assert_eq!(mock.generate(&r, 1).unwrap().candidates, vec!["a"]);
        assert_eq!(mock.generate(&r, 1).unwrap().candidates, vec!["b"]);
    }

    #[test]
    fn prompt_and_wildcard_fallbacks() {
        let mut script = MockScript::default();
        script.push("prompt:adjudicator", vec![vec!["adj".into()]]);
        script.push("*", vec![vec!["any".into()]]);
        let mock = MockBackend::new(script);
        let adj = ModelRequest {
            system_prompt: prompts::ADJUDICATOR.text.into(),
            ..req("x")
        };
        assert_eq!(mock.generate(&adj, 1).unwrap().candidates, vec!["adj"]);
        assert_eq!(mock.generate(&req("y"), 1).unwrap().candidates, vec!["any"]);
    }

    #[test]
    fn unscripted_request_is_fatal() {
        let mock = MockBackend::new(MockScript::default());
        assert!(matches!(mock.generate(&req("q"), 1), Err(BackendError::Fatal(_))));
    }

    #[test]
    fn script_json_shape() {
        let raw = r#"{"entries": [{"fingerprint": "f", "candidates_rounds": [["x", "y"], ["z"]]}]}"#;
        let script: MockScript = serde_json::from_str(raw).unwrap();
        assert_eq!(script.entries[0].candidates_rounds[1], vec!["z"]);
        assert_eq!(script.max_parts, None);
    }
}
