//! Uniform access to vision-language model backends.
//!
//! [`Gateway::complete`] guarantees exactly `candidate_count` candidates on
//! success. Backends that cannot sample several candidates per call get
//! `candidate_count` sequential single-candidate calls. Image-size rejections
//! halve every image (down to a 64px floor on the longer side) and retry.
//! Context-limit errors are surfaced unchanged so callers can chunk.

mod http;
mod limiter;
mod mock;
mod request;

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{
    classify_failure, gemini_body, openai_body, parse_gemini_reply, parse_openai_reply,
    HttpBackend, WireStyle, DEFAULT_GEMINI_BASE, DEFAULT_OPENAI_BASE,
};
pub use limiter::InflightLimiter;
pub use mock::{estimate_tokens, MockBackend, MockCall, MockEntry, MockScript};
pub use request::{fingerprint, ImageData, ModelRequest, Part};

pub const API_KEY_ENV: &str = "DOCLENS_API_KEY";
pub const API_BASE_ENV: &str = "DOCLENS_API_BASE";

/// Longer-side floor for resolution fallback.
pub const MIN_IMAGE_SIDE: u32 = 64;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("backend rejected the request: {0}")]
    Rejected(String),
    #[error("context limit exceeded: {0}")]
    ContextLimitExceeded(String),
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("images still too large at the {MIN_IMAGE_SIDE}px floor after {halvings} halving(s): {last}")]
    ImageTooLarge { halvings: u32, last: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid gateway configuration: {0}")]
    Config(String),
}

/// Failure classes a backend reports for a single call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("image too large: {0}")]
    ImageTooLarge(String),
    #[error("context limit: {0}")]
    ContextLimit(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("fatal: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub candidates: Vec<String>,
    pub usage: Option<Usage>,
}

/// One model provider. `generate` asks for `n` candidates in a single call;
/// it may return fewer.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, req: &ModelRequest, n: u32) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    HttpOpenaiStyle,
    HttpGeminiStyle,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub model_name: String,
    pub supports_candidate_count: bool,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
    pub retry_base_delay_ms: u64,
    /// Falls back to `DOCLENS_API_BASE`, then the style's public default.
    pub api_base: Option<String>,
    pub mock_script: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::HttpOpenaiStyle,
            model_name: "gpt-4o".into(),
            supports_candidate_count: true,
            max_retries: 3,
            request_timeout_secs: 300,
            retry_base_delay_ms: 500,
            api_base: None,
            mock_script: None,
        }
    }
}

impl GatewayConfig {
    pub fn mock(script: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            backend: BackendKind::Mock,
            model_name: "mock".into(),
            retry_base_delay_ms: 0,
            mock_script: Some(script.into()),
            ..Default::default()
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }

    /// Instantiates the configured backend.
    pub fn build_backend(&self) -> Result<Arc<dyn ModelBackend>, GatewayError> {
        let timeout = self.request_timeout();
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let base = |default: &str| {
            self.api_base
                .clone()
                .or_else(|| std::env::var(API_BASE_ENV).ok().filter(|b| !b.is_empty()))
                .unwrap_or_else(|| default.to_string())
        };
        Ok(match self.backend {
            BackendKind::Mock => {
                let path = self
                    .mock_script
                    .as_ref()
                    .ok_or_else(|| GatewayError::Config("mock backend needs mock_script".into()))?;
                let backend = MockBackend::from_file(path).map_err(|e| {
                    GatewayError::Config(format!("mock script {}: {e}", path.display()))
                })?;
                Arc::new(backend)
            }
            BackendKind::HttpOpenaiStyle => Arc::new(HttpBackend::new(
                WireStyle::OpenAi,
                base(DEFAULT_OPENAI_BASE),
                &self.model_name,
                key,
                timeout,
            )),
            BackendKind::HttpGeminiStyle => Arc::new(HttpBackend::new(
                WireStyle::Gemini,
                base(DEFAULT_GEMINI_BASE),
                &self.model_name,
                key,
                timeout,
            )),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub candidates: Vec<String>,
    pub usage: Option<Usage>,
    /// Fingerprint of the request as submitted (before any downscaling).
    pub fingerprint: String,
    pub backend_calls: u32,
    pub resolution_halvings: u32,
}

/// What a trace keeps about one `complete` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: String,
    pub backend: String,
    pub model: String,
    pub fingerprint: String,
    pub candidate_count: u32,
    pub temperature: f64,
    pub backend_calls: u32,
    pub resolution_halvings: u32,
    pub usage: Option<Usage>,
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    cfg: GatewayConfig,
    limiter: Arc<InflightLimiter>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("model", &self.cfg.model_name)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ModelBackend>, cfg: GatewayConfig, limiter: Arc<InflightLimiter>) -> Self {
        Gateway { backend, cfg, limiter }
    }

    pub fn from_config(cfg: &GatewayConfig, limiter: Arc<InflightLimiter>) -> Result<Self, GatewayError> {
        Ok(Gateway::new(cfg.build_backend()?, cfg.clone(), limiter))
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn record(&self, stage: &str, req: &ModelRequest, resp: &ModelResponse) -> CallRecord {
        CallRecord {
            stage: stage.to_string(),
            backend: self.backend.name().to_string(),
            model: self.cfg.model_name.clone(),
            fingerprint: resp.fingerprint.clone(),
            candidate_count: req.candidate_count,
            temperature: req.temperature,
            backend_calls: resp.backend_calls,
            resolution_halvings: resp.resolution_halvings,
            usage: resp.usage,
        }
    }

    pub fn complete(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        req.validate()?;
        let fp = fingerprint(req);
        let mut calls = 0u32;
        let mut halvings = 0u32;
        let mut scaled: Option<ModelRequest> = None;
        loop {
            let current = scaled.as_ref().unwrap_or(req);
            match self.collect(current, &mut calls) {
                Ok((candidates, usage)) => {
                    return Ok(ModelResponse {
                        candidates,
                        usage,
                        fingerprint: fp,
                        backend_calls: calls,
                        resolution_halvings: halvings,
                    })
                }
                Err(CallFailure::ImageTooLarge(msg)) => match halve_images(current)? {
                    Some(next) => {
                        tracing::warn!(halvings = halvings + 1, "image too large, retrying at half resolution");
                        halvings += 1;
                        scaled = Some(next);
                    }
                    None => return Err(GatewayError::ImageTooLarge { halvings, last: msg }),
                },
                Err(CallFailure::Gateway(e)) => return Err(e),
            }
        }
    }

    fn collect(
        &self,
        req: &ModelRequest,
        calls: &mut u32,
    ) -> Result<(Vec<String>, Option<Usage>), CallFailure> {
        let n = req.candidate_count as usize;
        let mut out = Vec::with_capacity(n);
        let mut usage: Option<Usage> = None;
        let mut add_usage = |u: Option<Usage>| {
            if let Some(u) = u {
                *usage.get_or_insert_with(Usage::default) += u;
            }
        };
        if self.cfg.supports_candidate_count {
            // Providers may return fewer candidates than asked; top up.
            while out.len() < n {
                let want = (n - out.len()) as u32;
                let reply = self.call_with_retry(req, want, calls)?;
                if reply.candidates.is_empty() {
                    return Err(CallFailure::Gateway(GatewayError::MalformedBackendReply(
                        "backend returned no candidates".into(),
                    )));
                }
                add_usage(reply.usage);
                out.extend(reply.candidates.into_iter().take(want as usize));
            }
        } else {
            for _ in 0..n {
                let reply = self.call_with_retry(req, 1, calls)?;
                let first = reply.candidates.into_iter().next().ok_or_else(|| {
                    CallFailure::Gateway(GatewayError::MalformedBackendReply(
                        "backend returned no candidates".into(),
                    ))
                })?;
                add_usage(reply.usage);
                out.push(first);
            }
        }
        Ok((out, usage))
    }

    fn call_with_retry(
        &self,
        req: &ModelRequest,
        n: u32,
        calls: &mut u32,
    ) -> Result<BackendReply, CallFailure> {
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            let result = {
                let _permit = self.limiter.acquire();
                *calls += 1;
                self.backend.generate(req, n)
            };
            match result {
                Ok(reply) => return Ok(reply),
                Err(BackendError::Transient(msg)) => {
                    tracing::warn!(attempt = attempt + 1, attempts, "transient backend failure: {msg}");
                    last = msg;
                    if attempt + 1 < attempts {
                        std::thread::sleep(backoff(self.cfg.retry_base_delay_ms, attempt));
                    }
                }
                Err(BackendError::ImageTooLarge(msg)) => return Err(CallFailure::ImageTooLarge(msg)),
                Err(BackendError::ContextLimit(msg)) => {
                    return Err(CallFailure::Gateway(GatewayError::ContextLimitExceeded(msg)))
                }
                Err(BackendError::Malformed(msg)) => {
                    return Err(CallFailure::Gateway(GatewayError::MalformedBackendReply(msg)))
                }
                Err(BackendError::Fatal(msg)) => {
                    return Err(CallFailure::Gateway(GatewayError::Rejected(msg)))
                }
            }
        }
        Err(CallFailure::Gateway(GatewayError::BackendUnavailable { attempts, last }))
    }
}

enum CallFailure {
    ImageTooLarge(String),
    Gateway(GatewayError),
}

impl From<GatewayError> for CallFailure {
    fn from(e: GatewayError) -> Self {
        CallFailure::Gateway(e)
    }
}

/// Exponential backoff with +/-25% jitter.
fn backoff(base_ms: u64, attempt: u32) -> Duration {
    if base_ms == 0 {
        return Duration::ZERO;
    }
    let exp = base_ms.saturating_mul(1u64 << attempt.min(16));
    let jitter = (exp / 4) as i64;
    let delta = if jitter > 0 {
        rand::random_range(-jitter..=jitter)
    } else {
        0
    };
    Duration::from_millis((exp as i64 + delta).max(1) as u64)
}

/// Halves every image whose longer side stays at or above the floor after
/// halving. Returns `None` when no image can shrink further.
pub fn halve_images(req: &ModelRequest) -> Result<Option<ModelRequest>, GatewayError> {
    let mut changed = false;
    let mut parts = Vec::with_capacity(req.parts.len());
    for part in &req.parts {
        match part {
            Part::Image(img) if img.width.max(img.height) / 2 >= MIN_IMAGE_SIDE => {
                let decoded = image::load_from_memory(&img.bytes)
                    .map_err(|e| GatewayError::InvalidRequest(format!("undecodable image: {e}")))?;
                let (w, h) = ((img.width / 2).max(1), (img.height / 2).max(1));
                let resized = decoded.resize_exact(w, h, FilterType::Triangle);
                let mut buf = Cursor::new(Vec::new());
                resized
                    .write_to(&mut buf, image::ImageFormat::Png)
                    .map_err(|e| GatewayError::InvalidRequest(format!("re-encode failed: {e}")))?;
                parts.push(Part::Image(ImageData {
                    bytes: buf.into_inner(),
                    mime: "image/png".into(),
                    width: w,
                    height: h,
                    label: img.label.clone(),
                }));
                changed = true;
            }
            other => parts.push(other.clone()),
        }
    }
    Ok(changed.then(|| ModelRequest {
        parts,
        ..req.clone()
    }))
}
