use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::Json;
use doclens_core::config::ConfigOverrides;
use doclens_core::pipeline::Pipeline;
use doclens_core::store::{RunId, StoreError};
use doclens_core::trace::{RunTrace, Stage, StageError, StageStatus};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::{ApiError, AppState};

/// Stage name used for the terminal event of a run.
pub const RUN_EVENT_STAGE: &str = "run";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Loading,
    Navigating,
    Localizing,
    Sampling,
    Adjudicating,
    Done,
    Failed,
}

impl RunStatus {
    fn running(stage: Stage) -> Self {
        match stage {
            Stage::Ingest => RunStatus::Loading,
            Stage::Navigation => RunStatus::Navigating,
            Stage::Localization => RunStatus::Localizing,
            Stage::Sampling => RunStatus::Sampling,
            Stage::Adjudication => RunStatus::Adjudicating,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed)
    }
}

/// Payload of every `stage` server-sent event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub run_id: String,
    pub stage: String,
    pub status: String,
}

fn status_str(s: StageStatus) -> &'static str {
    match s {
        StageStatus::Started => "started",
        StageStatus::Completed => "completed",
        StageStatus::Skipped => "skipped",
        StageStatus::Failed => "failed",
    }
}

struct RunState {
    status: RunStatus,
    doc_id: String,
    question: String,
    trace: Option<RunTrace>,
    error: Option<StageError>,
    history: Vec<StageEvent>,
}

pub(crate) struct RunHandle {
    run_id: RunId,
    state: Mutex<RunState>,
    events: broadcast::Sender<StageEvent>,
}

impl RunHandle {
    fn new(run_id: RunId, doc_id: &str, question: &str) -> Self {
        let (events, _) = broadcast::channel(64);
        RunHandle {
            run_id,
            state: Mutex::new(RunState {
                status: RunStatus::Queued,
                doc_id: doc_id.to_string(),
                question: question.to_string(),
                trace: None,
                error: None,
                history: Vec::new(),
            }),
            events,
        }
    }

    fn emit(&self, state: &mut RunState, stage: &str, status: &str) {
        let event = StageEvent {
            run_id: self.run_id.to_string(),
            stage: stage.to_string(),
            status: status.to_string(),
        };
        state.history.push(event.clone());
        // No receivers is fine; late subscribers replay the history.
        let _ = self.events.send(event);
    }

    fn on_stage(&self, stage: Stage, status: StageStatus, partial: &RunTrace) {
        let mut st = self.state.lock().expect("run lock");
        if status == StageStatus::Started {
            st.status = RunStatus::running(stage);
        }
        st.trace = Some(partial.clone());
        self.emit(&mut st, stage.as_str(), status_str(status));
    }

    fn finish(&self, trace: RunTrace) {
        let mut st = self.state.lock().expect("run lock");
        st.status = if trace.error.is_some() {
            RunStatus::Failed
        } else {
            RunStatus::Done
        };
        st.error = trace.error.clone();
        st.trace = Some(trace);
        let status = if st.status == RunStatus::Done { "done" } else { "failed" };
        self.emit(&mut st, RUN_EVENT_STAGE, status);
    }

    /// Past events plus a receiver for the rest, taken under one lock so no
    /// event is missed or duplicated.
    fn subscribe(&self) -> (Vec<StageEvent>, Option<broadcast::Receiver<StageEvent>>) {
        let st = self.state.lock().expect("run lock");
        let rx = (!st.status.is_terminal()).then(|| self.events.subscribe());
        (st.history.clone(), rx)
    }

    fn snapshot(&self) -> RunView {
        let st = self.state.lock().expect("run lock");
        RunView {
            run_id: self.run_id.to_string(),
            status: st.status,
            doc_id: st.doc_id.clone(),
            question: st.question.clone(),
            error: st.error.clone(),
            trace: st.trace.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub status: RunStatus,
    pub doc_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<RunTrace>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRequest {
    pub doc_id: String,
    pub question: String,
    #[serde(default)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Serialize)]
pub struct QuestionAccepted {
    pub run_id: String,
}

pub async fn submit(
    State(state): State<Arc<AppState>>,
    Json(req): Json<QuestionRequest>,
) -> Result<(StatusCode, Json<QuestionAccepted>), ApiError> {
    if req.question.trim().is_empty() {
        return Err(ApiError::unprocessable("question is empty"));
    }
    let doc = state.document(&req.doc_id)?;
    let cfg = req
        .config
        .applied_to(&state.cfg.pipeline)
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    if let Some(bad) = cfg
        .ablations
        .oracle_pages
        .iter()
        .flatten()
        .find(|p| **p == 0 || **p > doc.page_count())
    {
        return Err(ApiError::unprocessable(format!(
            "oracle page {bad} outside 1..={}",
            doc.page_count()
        )));
    }
    let pipeline = Pipeline::with_limiter(cfg, state.limiter.clone())
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;

    let run_id = RunId::generate();
    let handle = Arc::new(RunHandle::new(run_id.clone(), &doc.doc_id, &req.question));
    state
        .runs
        .write()
        .expect("runs lock")
        .insert(run_id.clone(), handle.clone());

    let store = state.store.clone();
    tokio::task::spawn_blocking(move || {
        let observer = |stage: Stage, status: StageStatus, partial: &RunTrace| handle.on_stage(stage, status, partial);
        let question_id = handle.run_id.to_string();
        let trace = match pipeline.ask(&doc, &question_id, &req.question, None, &observer) {
            Ok(t) => t,
            Err(failure) => {
                tracing::warn!(run = %handle.run_id, "{failure}");
                *failure.trace
            }
        };
        if let Err(e) = store.save_trace(&handle.run_id, &trace) {
            tracing::error!(run = %handle.run_id, "persisting trace: {e}");
        }
        handle.finish(trace);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(QuestionAccepted {
            run_id: run_id.to_string(),
        }),
    ))
}

impl AppState {
    fn run_handle(&self, raw: &str) -> Result<Result<Arc<RunHandle>, RunId>, ApiError> {
        let run_id: RunId = raw
            .parse()
            .map_err(|_| ApiError::not_found(format!("unknown run {raw}")))?;
        Ok(match self.runs.read().expect("runs lock").get(&run_id) {
            Some(h) => Ok(h.clone()),
            None => Err(run_id),
        })
    }

    /// A run finished by an earlier server process, rebuilt from the store.
    fn stored_run(&self, run_id: &RunId) -> Result<RunView, ApiError> {
        let traces = match self.store.load_run(run_id) {
            Ok(t) => t,
            Err(StoreError::UnknownRun(_)) => return Err(ApiError::not_found(format!("unknown run {run_id}"))),
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        let trace = traces
            .into_iter()
            .next()
            .ok_or_else(|| ApiError::not_found(format!("unknown run {run_id}")))?;
        Ok(RunView {
            run_id: run_id.to_string(),
            status: if trace.error.is_some() {
                RunStatus::Failed
            } else {
                RunStatus::Done
            },
            doc_id: trace.doc_id.clone(),
            question: trace.question.clone(),
            error: trace.error.clone(),
            trace: Some(trace),
        })
    }
}

pub async fn status(
    State(state): State<Arc<AppState>>,
    UrlPath(run_id): UrlPath<String>,
) -> Result<Json<RunView>, ApiError> {
    match state.run_handle(&run_id)? {
        Ok(handle) => Ok(Json(handle.snapshot())),
        Err(id) => Ok(Json(state.stored_run(&id)?)),
    }
}

fn to_sse(event: &StageEvent) -> Result<Event, Infallible> {
    Ok(Event::default()
        .event("stage")
        .data(serde_json::to_string(event).expect("event serializes")))
}

/// Replays past stage events, then streams live ones until the run ends.
pub async fn events(
    State(state): State<Arc<AppState>>,
    UrlPath(run_id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let (history, rx) = match state.run_handle(&run_id)? {
        Ok(handle) => handle.subscribe(),
        Err(id) => {
            let view = state.stored_run(&id)?;
            let terminal = StageEvent {
                run_id: view.run_id,
                stage: RUN_EVENT_STAGE.into(),
                status: if view.status == RunStatus::Done { "done" } else { "failed" }.into(),
            };
            (vec![terminal], None)
        }
    };
    let past = stream::iter(history.iter().map(to_sse).collect::<Vec<_>>());
    let live = stream::unfold(rx, |rx| async move {
        let mut rx = rx?;
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let next = (ev.stage != RUN_EVENT_STAGE).then_some(rx);
                    return Some((to_sse(&ev), next));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!("event stream lagged by {n}");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(past.chain(live)).keep_alive(KeepAlive::default()))
}
