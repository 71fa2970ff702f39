//! HTTP service over the doclens pipeline.
//!
//! Routes:
//! - `GET /documents`, `POST /documents` (multipart bundle upload)
//! - `GET /documents/{id}`, `.../pages/{n}/image`, `.../pages/{n}/elements/{k}/crop`
//! - `POST /questions`, `GET /runs/{id}`, `GET /runs/{id}/events` (SSE)
//! - `/ui` static assets

mod documents;
mod error;
mod runs;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use doclens_core::document::Document;
use doclens_core::gateway::InflightLimiter;
use doclens_core::store::{RunId, RunStore};
use doclens_core::tools::ParsingTools;
use doclens_core::PipelineConfig;
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use runs::{RunStatus, StageEvent};

/// Upload size cap for a whole bundle.
pub const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Holds `documents/` and the run store.
    pub data_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

pub struct AppState {
    cfg: ServerConfig,
    store: RunStore,
    tools: ParsingTools,
    limiter: Arc<InflightLimiter>,
    documents: RwLock<HashMap<String, Arc<Document>>>,
    runs: RwLock<HashMap<RunId, Arc<runs::RunHandle>>>,
}

impl AppState {
    pub fn new(cfg: ServerConfig) -> Result<Arc<Self>, ApiError> {
        cfg.pipeline
            .validate()
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let tools = ParsingTools::new(cfg.pipeline.tools.clone()).map_err(|e| ApiError::internal(e.to_string()))?;
        std::fs::create_dir_all(cfg.data_dir.join("documents")).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Arc::new(AppState {
            store: RunStore::new(cfg.data_dir.join("store")),
            limiter: Arc::new(InflightLimiter::new(cfg.pipeline.max_inflight)),
            tools,
            cfg,
            documents: RwLock::new(HashMap::new()),
            runs: RwLock::new(HashMap::new()),
        }))
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    fn documents_dir(&self) -> PathBuf {
        self.cfg.data_dir.join("documents")
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route(
            "/documents",
            get(documents::list)
                .post(documents::upload)
                .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/documents/{doc_id}", get(documents::manifest))
        .route("/documents/{doc_id}/pages/{page}/image", get(documents::page_image))
        .route(
            "/documents/{doc_id}/pages/{page}/elements/{element}/crop",
            get(documents::element_crop),
        )
        .route("/questions", post(runs::submit))
        .route("/runs/{run_id}", get(runs::status))
        .route("/runs/{run_id}/events", get(runs::events));
    if let Some(dir) = &state.cfg.ui_dir {
        let index = dir.join("index.html");
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true).fallback(
            tower_http::services::ServeFile::new(index),
        ));
    }
    app.with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "listening");
    axum::serve(listener, router(state)).await
}
