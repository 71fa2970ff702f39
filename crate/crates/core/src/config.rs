//! Pipeline configuration, TOML loading and flag overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::GatewayConfig;
use crate::navigator::NavigatorConfig;
use crate::prompts::sha256_hex;
use crate::reasoning::ReasonerConfig;
use crate::tools::ToolBackendConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Skip navigation and localization; reason over every page with its text.
    pub no_lens: bool,
    /// One answer at temperature 0 from the lens output, no adjudication.
    pub no_reasoning: bool,
    /// Navigator draws a single sample.
    pub no_sampling: bool,
    /// Page images only; no OCR text anywhere.
    pub no_ocr: bool,
    /// Replace navigation with these pages.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_pages: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub navigator: NavigatorConfig,
    pub reasoner: ReasonerConfig,
    pub tools: ToolBackendConfig,
    pub navigator_gateway: GatewayConfig,
    pub reasoner_gateway: GatewayConfig,
    pub ablations: Ablations,
    /// Global cap on concurrent backend calls.
    pub max_inflight: usize,
    /// Pages localized concurrently within one question.
    pub page_parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            navigator: NavigatorConfig::default(),
            reasoner: ReasonerConfig::default(),
            tools: ToolBackendConfig::default(),
            navigator_gateway: GatewayConfig::default(),
            reasoner_gateway: GatewayConfig::default(),
            ablations: Ablations::default(),
            max_inflight: 16,
            page_parallelism: 4,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self, ConfigError> {
        toml::from_str(raw).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&raw)
    }

    /// Both stages on the same mock script.
    pub fn mock(script: &Path) -> Self {
        PipelineConfig {
            navigator_gateway: GatewayConfig::mock(script),
            reasoner_gateway: GatewayConfig::mock(script),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.navigator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.reasoner
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tools
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.max_inflight == 0 || self.page_parallelism == 0 {
            return Err(ConfigError::Invalid(
                "max_inflight and page_parallelism must be >= 1".into(),
            ));
        }
        if let Some(pages) = &self.ablations.oracle_pages {
            if pages.contains(&0) {
                return Err(ConfigError::Invalid("oracle pages are 1-based".into()));
            }
        }
        if self.ablations.no_lens && self.ablations.oracle_pages.is_some() {
            return Err(ConfigError::Invalid(
                "no_lens and oracle_pages are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    /// Navigator settings after ablations.
    pub fn effective_navigator(&self) -> NavigatorConfig {
        let mut nav = self.navigator.clone();
        if self.ablations.no_sampling {
            nav.t_e = 1;
        }
        nav
    }

    /// Reasoner settings after ablations.
    pub fn effective_reasoner(&self) -> ReasonerConfig {
        let mut r = self.reasoner.clone();
        if self.ablations.no_reasoning {
            r.t_a = 1;
            r.temperature = 0.0;
        }
        r
    }

    /// Deterministic view of the configuration for traces: machine-local
    /// paths are dropped and a mock script is identified by its digest.
    pub fn snapshot(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(tools) = v.get_mut("tools").and_then(Value::as_object_mut) {
            tools.remove("cache_dir");
        }
        for (key, gw) in [
            ("navigator_gateway", &self.navigator_gateway),
            ("reasoner_gateway", &self.reasoner_gateway),
        ] {
            if let Some(obj) = v.get_mut(key).and_then(Value::as_object_mut) {
                obj.remove("mock_script");
                if let Some(path) = &gw.mock_script {
                    let digest = std::fs::read(path)
                        .map(|b| sha256_hex(&b))
                        .unwrap_or_else(|_| "unreadable".into());
                    obj.insert("mock_script_sha256".into(), Value::String(digest));
                }
            }
        }
        v
    }
}

/// Per-run overrides shared by CLI flags and the HTTP API.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    pub te: Option<u32>,
    pub ta: Option<u32>,
    pub temperature: Option<f64>,
    pub chunk_size: Option<u32>,
    pub no_lens: Option<bool>,
    pub no_reasoning: Option<bool>,
    pub no_sampling: Option<bool>,
    pub no_ocr: Option<bool>,
    pub oracle_pages: Option<Vec<u32>>,
    pub navigator_model: Option<String>,
    pub reasoner_model: Option<String>,
}

impl ConfigOverrides {
    /// Applies overrides; `temperature` sets both sampling temperatures.
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.te {
            cfg.navigator.t_e = v;
        }
        if let Some(v) = self.ta {
            cfg.reasoner.t_a = v;
        }
        if let Some(v) = self.temperature {
            cfg.navigator.temperature = v;
            cfg.reasoner.temperature = v;
        }
        if let Some(v) = self.chunk_size {
            cfg.navigator.chunk_size = v;
        }
        let flags = [
            (self.no_lens, &mut cfg.ablations.no_lens),
            (self.no_reasoning, &mut cfg.ablations.no_reasoning),
            (self.no_sampling, &mut cfg.ablations.no_sampling),
            (self.no_ocr, &mut cfg.ablations.no_ocr),
        ];
        for (src, dst) in flags {
            if let Some(v) = src {
                *dst = v;
            }
        }
        if let Some(pages) = &self.oracle_pages {
            cfg.ablations.oracle_pages = Some(pages.clone());
        }
        if let Some(m) = &self.navigator_model {
            cfg.navigator_gateway.model_name = m.clone();
        }
        if let Some(m) = &self.reasoner_model {
            cfg.reasoner_gateway.model_name = m.clone();
        }
    }

    pub fn applied_to(&self, base: &PipelineConfig) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = base.clone();
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}
