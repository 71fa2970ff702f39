use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use doclens_core::document::{load_document, Document};
use doclens_core::localizer::crop_for;
use serde::Serialize;

use crate::{ApiError, AppState};

#[derive(Debug, Serialize)]
pub struct DocumentSummary {
    pub doc_id: String,
    pub page_count: u32,
}

impl From<&Document> for DocumentSummary {
    fn from(doc: &Document) -> Self {
        DocumentSummary {
            doc_id: doc.doc_id.clone(),
            page_count: doc.page_count(),
        }
    }
}

fn is_safe_id(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Relative path inside a bundle, rejecting anything that could escape it.
fn bundle_relative(name: &str) -> Option<PathBuf> {
    let path = Path::new(name);
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

impl AppState {
    pub(crate) fn document(&self, doc_id: &str) -> Result<Arc<Document>, ApiError> {
        if let Some(doc) = self.documents.read().expect("documents lock").get(doc_id) {
            return Ok(doc.clone());
        }
        let dir = self.documents_dir().join(doc_id);
        if !is_safe_id(doc_id) || !dir.is_dir() {
            return Err(ApiError::not_found(format!("unknown document {doc_id}")));
        }
        let doc = Arc::new(load_document(&dir).map_err(|e| ApiError::internal(e.to_string()))?);
        self.documents
            .write()
            .expect("documents lock")
            .insert(doc_id.to_string(), doc.clone());
        Ok(doc)
    }

    fn list_documents(&self) -> Vec<DocumentSummary> {
        let Ok(entries) = std::fs::read_dir(self.documents_dir()) else {
            return Vec::new();
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| is_safe_id(n))
            .collect();
        ids.sort();
        ids.iter()
            .filter_map(|id| self.document(id).ok())
            .map(|d| DocumentSummary::from(d.as_ref()))
            .collect()
    }

    /// Validates a staged bundle and moves it into place under its doc id.
    fn install_bundle(&self, staged: &Path) -> Result<(StatusCode, Arc<Document>), ApiError> {
        let doc = load_document(staged).map_err(|e| ApiError::conflict(format!("invalid bundle: {e}")))?;
        if !is_safe_id(&doc.doc_id) {
            return Err(ApiError::conflict(format!("doc_id {:?} is not usable as an identifier", doc.doc_id)));
        }
        if let Ok(existing) = self.document(&doc.doc_id) {
            if existing.same_content(&doc) {
                return Ok((StatusCode::OK, existing));
            }
            return Err(ApiError::conflict(format!(
                "document {} already exists with different content",
                doc.doc_id
            )));
        }
        let target = self.documents_dir().join(&doc.doc_id);
        std::fs::rename(staged, &target).map_err(|e| ApiError::internal(e.to_string()))?;
        let doc = Arc::new(load_document(&target).map_err(|e| ApiError::internal(e.to_string()))?);
        self.documents
            .write()
            .expect("documents lock")
            .insert(doc.doc_id.clone(), doc.clone());
        Ok((StatusCode::CREATED, doc))
    }
}

pub async fn list(State(state): State<Arc<AppState>>) -> Json<Vec<DocumentSummary>> {
    Json(state.list_documents())
}

/// Each multipart field is one bundle file; its file name (or field name)
/// is the path relative to the bundle root, e.g. `pages/p1.png`.
pub async fn upload(
    State(state): State<Arc<AppState>>,
    mut multipart: Multipart,
) -> Result<(StatusCode, Json<DocumentSummary>), ApiError> {
    let staging = tempfile::Builder::new()
        .prefix(".upload-")
        .tempdir_in(state.documents_dir())
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let mut files = 0;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let name = field
            .file_name()
            .or(field.name())
            .map(str::to_string)
            .unwrap_or_default();
        let rel = bundle_relative(&name).ok_or_else(|| ApiError::conflict(format!("invalid bundle path {name:?}")))?;
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        let dest = staging.path().join(rel);
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        std::fs::write(&dest, &bytes).map_err(|e| ApiError::internal(e.to_string()))?;
        files += 1;
    }
    if files == 0 {
        return Err(ApiError::conflict("empty upload"));
    }
    let staged = staging.path().to_path_buf();
    let state2 = state.clone();
    let (status, doc) = tokio::task::spawn_blocking(move || state2.install_bundle(&staged))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((status, Json(DocumentSummary::from(doc.as_ref()))))
}

pub async fn manifest(
    State(state): State<Arc<AppState>>,
    UrlPath(doc_id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(state.document(&doc_id)?.manifest_json()))
}

fn page_index(doc: &Document, raw: &str) -> Result<u32, ApiError> {
    raw.parse::<u32>()
        .ok()
        .filter(|i| (1..=doc.page_count()).contains(i))
        .ok_or_else(|| ApiError::not_found(format!("page {raw} not in 1..={}", doc.page_count())))
}

pub async fn page_image(
    State(state): State<Arc<AppState>>,
    UrlPath((doc_id, page)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let doc = state.document(&doc_id)?;
    let index = page_index(&doc, &page)?;
    let record = doc
        .get_page(i64::from(index))
        .map_err(|e| ApiError::not_found(e.to_string()))?;
    let bytes = doc
        .read_image_bytes(record)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, record.image_mime())], bytes).into_response())
}

pub async fn element_crop(
    State(state): State<Arc<AppState>>,
    UrlPath((doc_id, page, element)): UrlPath<(String, String, String)>,
) -> Result<Response, ApiError> {
    let doc = state.document(&doc_id)?;
    let index = page_index(&doc, &page)?;
    let number: u32 = element
        .parse()
        .map_err(|_| ApiError::not_found(format!("element {element}")))?;
    let state2 = state.clone();
    let crop = tokio::task::spawn_blocking(move || crop_for(&doc, index, number, &state2.tools))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?
        .ok_or_else(|| ApiError::not_found(format!("element {number} on page {index}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], crop.png).into_response())
}
