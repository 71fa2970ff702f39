//! End-to-end question answering over one document.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::document::Document;
use crate::gateway::{Gateway, GatewayError, InflightLimiter};
use crate::localizer::{localize, whole_document_evidence, LocalizeError};
use crate::navigator::{navigate, NavigationResult, NavigatorError, PageTexts};
use crate::par::map_ordered;
use crate::reasoning::{adjudicate, sample_answers, ReasoningError};
use crate::tools::{ParsingTools, ToolError};
use crate::trace::{RunTrace, Stage, StageError, StageRecord, StageStatus};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Navigation(#[from] NavigatorError),
    #[error(transparent)]
    Localization(#[from] LocalizeError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
}

/// A stage failed. `trace` holds everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("{stage} failed: {error}")]
pub struct StageFailure {
    pub stage: Stage,
    #[source]
    pub error: PipelineError,
    pub trace: Box<RunTrace>,
}

/// Receives stage transitions as they happen, with the trace so far.
pub trait StageObserver: Send + Sync {
    fn on_stage(&self, stage: Stage, status: StageStatus, partial: &RunTrace);
}

impl StageObserver for () {
    fn on_stage(&self, _: Stage, _: StageStatus, _: &RunTrace) {}
}

impl<F: Fn(Stage, StageStatus, &RunTrace) + Send + Sync> StageObserver for F {
    fn on_stage(&self, stage: Stage, status: StageStatus, partial: &RunTrace) {
        self(stage, status, partial)
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    navigator_gw: Gateway,
    reasoner_gw: Gateway,
    tools: ParsingTools,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let limiter = Arc::new(InflightLimiter::new(cfg.max_inflight));
        Self::with_limiter(cfg, limiter)
    }

    /// Shares `limiter` with other pipelines so the in-flight cap is global.
    pub fn with_limiter(cfg: PipelineConfig, limiter: Arc<InflightLimiter>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let navigator_gw = Gateway::from_config(&cfg.navigator_gateway, limiter.clone())?;
        let reasoner_gw = Gateway::from_config(&cfg.reasoner_gateway, limiter)?;
        Self::with_gateways(cfg, navigator_gw, reasoner_gw)
    }

    pub fn with_gateways(cfg: PipelineConfig, navigator_gw: Gateway, reasoner_gw: Gateway) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let tools = ParsingTools::new(cfg.tools.clone())?;
        Ok(Pipeline {
            cfg,
            navigator_gw,
            reasoner_gw,
            tools,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn tools(&self) -> &ParsingTools {
        &self.tools
    }

    pub fn navigator_gateway(&self) -> &Gateway {
        &self.navigator_gw
    }

    pub fn reasoner_gateway(&self) -> &Gateway {
        &self.reasoner_gw
    }

    /// OCR text for every page. Pages whose text cannot be obtained are
    /// returned separately and contribute image-only parts.
    pub fn ocr_pass(&self, doc: &Document) -> (PageTexts, Vec<u32>) {
        if self.cfg.ablations.no_ocr {
            return (PageTexts::new(), Vec::new());
        }
        let results = map_ordered(doc.pages(), self.cfg.page_parallelism, |page| {
            (page.index, self.tools.ocr_page(doc, page))
        });
        let mut texts = PageTexts::new();
        let mut missing = Vec::new();
        for (index, r) in results {
            match r {
                Ok(t) => {
                    texts.insert(index, t);
                }
                Err(e) => {
                    tracing::warn!(page = index, "OCR unavailable: {e}");
                    missing.push(index);
                }
            }
        }
        (texts, missing)
    }

    /// Runs the configured pipeline. `oracle` replaces navigation for this
    /// question and takes precedence over `ablations.oracle_pages`.
    pub fn ask(
        &self,
        doc: &Document,
        question_id: &str,
        question: &str,
        oracle: Option<&BTreeSet<u32>>,
        observer: &dyn StageObserver,
    ) -> Result<RunTrace, Box<StageFailure>> {
        let cfg = &self.cfg;
        let mut trace = RunTrace::new(question_id, &doc.doc_id, question, doc.page_count(), cfg.snapshot());
        let mut run = Run {
            trace: &mut trace,
            observer,
        };

        let (texts, missing) = self.ocr_pass(doc);
        run.trace.ocr_missing = missing;

        let config_oracle: Option<BTreeSet<u32>> =
            cfg.ablations.oracle_pages.as_ref().map(|p| p.iter().copied().collect());
        let oracle = oracle.or(config_oracle.as_ref());

        let evidence = if cfg.ablations.no_lens {
            run.skip(Stage::Navigation, "no_lens");
            run.skip(Stage::Localization, "no_lens");
            let ev = whole_document_evidence(doc, question, &texts);
            run.trace.evidence = Some(ev.clone());
            ev
        } else {
            let e_pred: BTreeSet<u32> = match oracle {
                Some(pages) => {
                    run.trace.navigation = Some(NavigationResult::from_pages(pages.iter().copied()));
                    run.skip(Stage::Navigation, "oracle_pages");
                    pages.clone()
                }
                None => {
                    run.start(Stage::Navigation);
                    let nav = navigate(doc, &texts, question, &cfg.effective_navigator(), &self.navigator_gw);
                    let nav = run.check(Stage::Navigation, nav)?;
                    let e_pred = nav.e_pred.iter().copied().collect();
                    run.trace.navigation = Some(nav);
                    run.complete(Stage::Navigation);
                    e_pred
                }
            };

            run.start(Stage::Localization);
            let ev = localize(doc, question, &e_pred, &texts, &self.tools, cfg.page_parallelism);
            let ev = run.check(Stage::Localization, ev)?;
            run.trace.evidence = Some(ev.clone());
            run.complete(Stage::Localization);
            ev
        };

        let reasoner = cfg.effective_reasoner();
        run.start(Stage::Sampling);
        let sampling = sample_answers(doc, &evidence, &reasoner, &self.reasoner_gw);
        let sampling = run.check(Stage::Sampling, sampling)?;
        let candidates = sampling.candidates.clone();
        run.trace.sampling = Some(sampling);
        run.trace.recompute_usage();
        run.complete(Stage::Sampling);

        if cfg.ablations.no_reasoning {
            run.trace.final_answer = Some(candidates[0].answer.clone());
            run.skip(Stage::Adjudication, "no_reasoning");
        } else {
            run.start(Stage::Adjudication);
            let adj = adjudicate(question, &candidates, &reasoner, &self.reasoner_gw);
            let adj = run.check(Stage::Adjudication, adj)?;
            run.trace.final_answer = Some(adj.final_answer.clone());
            run.trace.adjudication = Some(adj);
            run.trace.recompute_usage();
            run.complete(Stage::Adjudication);
        }
        trace.recompute_usage();
        Ok(trace)
    }
}

struct Run<'a> {
    trace: &'a mut RunTrace,
    observer: &'a dyn StageObserver,
}

impl Run<'_> {
    fn start(&mut self, stage: Stage) {
        self.observer.on_stage(stage, StageStatus::Started, self.trace);
    }

    fn skip(&mut self, stage: Stage, note: &str) {
        self.trace.stages.push(StageRecord {
            stage,
            status: StageStatus::Skipped,
            note: Some(note.to_string()),
        });
        self.observer.on_stage(stage, StageStatus::Skipped, self.trace);
    }

    fn complete(&mut self, stage: Stage) {
        self.trace.stages.push(StageRecord {
            stage,
            status: StageStatus::Completed,
            note: None,
        });
        self.observer.on_stage(stage, StageStatus::Completed, self.trace);
    }

    /// Unwraps a stage result, recording the failure in the trace on error.
    fn check<T, E: Into<PipelineError>>(&mut self, stage: Stage, r: Result<T, E>) -> Result<T, Box<StageFailure>> {
        r.map_err(|e| {
            let error: PipelineError = e.into();
            self.trace.stages.push(StageRecord {
                stage,
                status: StageStatus::Failed,
                note: None,
            });
            self.trace.error = Some(StageError {
                stage,
                message: error.to_string(),
            });
            self.trace.recompute_usage();
            self.observer.on_stage(stage, StageStatus::Failed, self.trace);
            Box::new(StageFailure {
                stage,
                error,
                trace: Box::new(self.trace.clone()),
            })
        })
    }
}
