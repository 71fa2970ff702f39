pub mod config;
pub mod document;
pub mod fixtures;
mod fsutil;
pub mod gateway;
pub mod localizer;
pub mod navigator;
pub mod par;
pub mod parse;
pub mod pipeline;
pub mod prompts;
pub mod reasoning;
pub mod store;
#[cfg(test)]
mod test_http;
pub mod tools;
pub mod trace;

pub use config::{Ablations, ConfigOverrides, PipelineConfig};
pub use document::{load_document, Document};
pub use fsutil::write_atomic;
pub use pipeline::{Pipeline, StageFailure, StageObserver};
pub use trace::{RunTrace, Stage, StageStatus};
