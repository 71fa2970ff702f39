//! HTTP backends: OpenAI-style chat completions and Gemini-style
//! generateContent, with images inlined as base64.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Value};

use super::{BackendError, BackendReply, ModelBackend, ModelRequest, Part, Usage};

pub const DEFAULT_OPENAI_BASE: &str = "https://api.openai.com/v1";
pub const DEFAULT_GEMINI_BASE: &str = "https://generativelanguage.googleapis.com/v1beta";

fn data_url(mime: &str, bytes: &[u8]) -> String {
    format!("data:{mime};base64,{}", B64.encode(bytes))
}

/// Chat-completions request body. Labeled images get a text item right
/// before them.
pub fn openai_body(model: &str, req: &ModelRequest, n: u32) -> Value {
    let mut content = Vec::with_capacity(req.parts.len());
    for part in &req.parts {
        match part {
            Part::Text(t) => content.push(json!({"type": "text", "text": t})),
            Part::Image(img) => {
                if let Some(label) = &img.label {
                    content.push(json!({"type": "text", "text": label}));
                }
                content.push(json!({
                    "type": "image_url",
                    "image_url": {"url": data_url(&img.mime, &img.bytes)}
                }));
            }
        }
    }
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": req.system_prompt},
            {"role": "user", "content": content}
        ],
        "temperature": req.temperature,
        "n": n,
    })
}

pub fn parse_openai_reply(body: &str) -> Result<BackendReply, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Malformed(format!("invalid JSON: {e}")))?;
    let choices = v["choices"]
        .as_array()
        .ok_or_else(|| BackendError::Malformed("missing `choices`".into()))?;
    let mut indexed: Vec<(u64, String)> = choices
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let text = c["message"]["content"].as_str()?;
            Some((c["index"].as_u64().unwrap_or(i as u64), text.to_string()))
        })
        .collect();
    indexed.sort_by_key(|(i, _)| *i);
    let usage = v.get("usage").and_then(|u| {
        Some(Usage {
            input_tokens: u["prompt_tokens"].as_u64()?,
            output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
        })
    });
    Ok(BackendReply {
        candidates: indexed.into_iter().map(|(_, t)| t).collect(),
        usage,
    })
}

pub fn gemini_body(req: &ModelRequest, n: u32) -> Value {
    let mut parts = Vec::with_capacity(req.parts.len());
    for part in &req.parts {
        match part {
            Part::Text(t) => parts.push(json!({"text": t})),
            Part::Image(img) => {
                if let Some(label) = &img.label {
                    parts.push(json!({"text": label}));
                }
                parts.push(json!({
                    "inlineData": {"mimeType": img.mime, "data": B64.encode(&img.bytes)}
                }));
            }
        }
    }
    json!({
        "systemInstruction": {"parts": [{"text": req.system_prompt}]},
        "contents": [{"role": "user", "parts": parts}],
        "generationConfig": {"temperature": req.temperature, "candidateCount": n},
    })
}

pub fn parse_gemini_reply(body: &str) -> Result<BackendReply, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Malformed(format!("invalid JSON: {e}")))?;
    let cands = v["candidates"]
        .as_array()
        .ok_or_else(|| BackendError::Malformed("missing `candidates`".into()))?;
    let candidates = cands
        .iter()
        .filter_map(|c| {
            let parts = c["content"]["parts"].as_array()?;
            let text: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
            Some(text)
        })
        .collect();
    let usage = v.get("usageMetadata").and_then(|u| {
        Some(Usage {
            input_tokens: u["promptTokenCount"].as_u64()?,
            output_tokens: u["candidatesTokenCount"].as_u64().unwrap_or(0),
        })
    });
    Ok(BackendReply { candidates, usage })
}

/// Maps an HTTP failure to a backend error class.
pub fn classify_failure(status: u16, body: &str) -> BackendError {
    let lower = body.to_ascii_lowercase();
    let context = lower.contains("context length")
        || lower.contains("context window")
        || lower.contains("context_length")
        || lower.contains("maximum context")
        || lower.contains("too many tokens")
        || lower.contains("prompt is too long")
        || lower.contains("input token count");
    let image = lower.contains("image")
        && ["too large", "size", "dimension", "resolution", "exceed", "pixels"]
            .iter()
            .any(|k| lower.contains(k));
    match status {
        408 | 429 | 500..=599 => BackendError::Transient(format!("HTTP {status}: {body}")),
        413 => BackendError::ImageTooLarge(format!("HTTP 413: {body}")),
        _ if context => BackendError::ContextLimit(format!("HTTP {status}: {body}")),
        _ if image => BackendError::ImageTooLarge(format!("HTTP {status}: {body}")),
        _ => BackendError::Fatal(format!("HTTP {status}: {body}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireStyle {
    OpenAi,
    Gemini,
}

#[derive(Debug)]
pub struct HttpBackend {
    style: WireStyle,
    base: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    name: String,
}

impl HttpBackend {
    pub fn new(
        style: WireStyle,
        base: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let name = match style {
            WireStyle::OpenAi => "http_openai_style",
            WireStyle::Gemini => "http_gemini_style",
        };
        HttpBackend {
            style,
            base: base.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent,
            name: name.into(),
        }
    }

    fn endpoint(&self) -> String {
        match self.style {
            WireStyle::OpenAi => format!("{}/chat/completions", self.base),
            WireStyle::Gemini => format!("{}/models/{}:generateContent", self.base, self.model),
        }
    }
}

impl ModelBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, req: &ModelRequest, n: u32) -> Result<BackendReply, BackendError> {
        let body = match self.style {
            WireStyle::OpenAi => openai_body(&self.model, req, n),
            WireStyle::Gemini => gemini_body(req, n),
        };
        let url = self.endpoint();
        let mut call = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = match self.style {
                WireStyle::OpenAi => call.header("Authorization", format!("Bearer {key}")),
                WireStyle::Gemini => call.header("x-goog-api-key", key),
            };
        }
        let payload = serde_json::to_vec(&body).expect("request body serializes");
        let mut resp = call
            .send(&payload[..])
            .map_err(|e| BackendError::Transient(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| BackendError::Transient(format!("{url}: body read failed: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_failure(status, &text));
        }
        match self.style {
            WireStyle::OpenAi => parse_openai_reply(&text),
            WireStyle::Gemini => parse_gemini_reply(&text),
        }
    }
}
