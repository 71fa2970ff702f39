//! Document-parsing tool adapters: OCR, layout detection and cropping.
//!
//! Three backends sit behind [`ParsingTools`]:
//! * `cached` reads OCR and layout precomputed into the bundle (or into the
//!   cache directory by a previous `http` run),
//! * `http` calls a parsing service (`POST {endpoint}/ocr`, `POST {endpoint}/layout`),
//! * `mock` returns deterministic output keyed by `(doc_id, page index)`.

use std::fs;
use std::io::Cursor;
use std::path::PathBuf;
use std::time::Duration;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::document::{BBox, Document, ElementKind, PageRecord, VisualElement};
use crate::fsutil::write_atomic;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("tool unavailable: {0}")]
    ToolUnavailable(String),
    #[error("tool protocol error: {0}")]
    ToolProtocolError(String),
    #[error("page {page}: crop box {bbox:?} lies outside the {width}x{height} page")]
    BBoxOutOfBounds {
        page: u32,
        bbox: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("image decode failed: {0}")]
    ImageDecode(#[from] image::ImageError),
    #[error("invalid tool configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolMode {
    #[default]
    Cached,
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolBackendConfig {
    pub mode: ToolMode,
    pub endpoint: Option<String>,
    pub cache_dir: PathBuf,
    pub timeout_secs: u64,
}

impl Default for ToolBackendConfig {
    fn default() -> Self {
        ToolBackendConfig {
            mode: ToolMode::Cached,
            endpoint: None,
            cache_dir: PathBuf::from(".doclens-cache"),
            timeout_secs: 120,
        }
    }
}

impl ToolBackendConfig {
    pub fn validate(&self) -> Result<(), ToolError> {
        if self.mode == ToolMode::Http && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(ToolError::Config("http mode requires an endpoint".into()));
        }
        Ok(())
    }
}

/// Visual elements detected on one page, in reading order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutManifest {
    pub page_index: u32,
    pub elements: Vec<VisualElement>,
}

/// A block as emitted by a layout detector, before filtering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawBlock {
    pub kind: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct RawLayout {
    #[serde(default)]
    elements: Vec<RawBlock>,
}

/// Keeps only table/figure/chart blocks, clamps boxes to the page, drops
/// boxes with no remaining area, and orders by reading order (top-to-bottom,
/// then left-to-right).
pub fn normalize_layout(page: &PageRecord, raw: Vec<RawBlock>) -> LayoutManifest {
    let w = f64::from(page.width_px);
    let h = f64::from(page.height_px);
    let mut elements: Vec<VisualElement> = raw
        .into_iter()
        .filter_map(|block| {
            let kind = block.kind.parse::<ElementKind>().ok()?;
            let [x1, y1, x2, y2] = block.bbox;
            let bbox = BBox::new(x1.max(0.0), y1.max(0.0), x2.min(w), y2.min(h)).ok()?;
            Some(VisualElement::new(kind, bbox))
        })
        .collect();
    sort_reading_order(&mut elements);
    LayoutManifest {
        page_index: page.index,
        elements,
    }
}

fn sort_reading_order(elements: &mut [VisualElement]) {
    elements.sort_by(|a, b| {
        a.bbox
            .y1()
            .total_cmp(&b.bbox.y1())
            .then(a.bbox.x1().total_cmp(&b.bbox.x1()))
    });
}

/// Integer pixel rectangle `(x, y, width, height)` for a crop. Width and
/// height are `round(x2 - x1)` and `round(y2 - y1)` (half-up, at least 1);
/// the origin is `round(x1), round(y1)` shifted inward if rounding would
/// overrun the raster.
pub fn crop_rect(bbox: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let cw = (bbox.width().round() as u32).clamp(1, width);
    let ch = (bbox.height().round() as u32).clamp(1, height);
    let x = (bbox.x1().round() as u32).min(width - cw);
    let y = (bbox.y1().round() as u32).min(height - ch);
    (x, y, cw, ch)
}

/// Crops `bbox` out of the page raster, copying pixels verbatim.
pub fn crop_element(
    page: &PageRecord,
    raster: &DynamicImage,
    bbox: &BBox,
) -> Result<DynamicImage, ToolError> {
    let (w, h) = (raster.width(), raster.height());
    if !bbox.is_within(page.width_px, page.height_px) || !bbox.is_within(w, h) {
        return Err(ToolError::BBoxOutOfBounds {
            page: page.index,
            bbox: bbox.coords(),
            width: page.width_px,
            height: page.height_px,
        });
    }
    let (x, y, cw, ch) = crop_rect(bbox, w, h);
    Ok(raster.crop_imm(x, y, cw, ch))
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>, ToolError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[derive(Debug, Clone)]
pub struct ParsingTools {
    cfg: ToolBackendConfig,
}

impl ParsingTools {
    pub fn new(cfg: ToolBackendConfig) -> Result<Self, ToolError> {
        cfg.validate()?;
        Ok(ParsingTools { cfg })
    }

    pub fn config(&self) -> &ToolBackendConfig {
        &self.cfg
    }

    fn doc_cache_dir(&self, doc_id: &str) -> PathBuf {
        self.cfg.cache_dir.join(sanitize(doc_id))
    }

    fn ocr_cache_path(&self, doc_id: &str, index: u32) -> PathBuf {
        self.doc_cache_dir(doc_id).join(format!("p{index}.md"))
    }

    fn layout_cache_path(&self, doc_id: &str, index: u32) -> PathBuf {
        self.doc_cache_dir(doc_id).join(format!("p{index}.layout.json"))
    }

    /// Relative location of a crop inside the cache directory: `{doc_id}/p{index}_e{k}.png`.
    pub fn crop_relative_path(doc_id: &str, index: u32, k: usize) -> PathBuf {
        PathBuf::from(sanitize(doc_id)).join(format!("p{index}_e{k}.png"))
    }

    pub fn crop_cache_path(&self, doc_id: &str, index: u32, k: usize) -> PathBuf {
        self.cfg.cache_dir.join(Self::crop_relative_path(doc_id, index, k))
    }

    /// Writes an encoded crop into the cache with an atomic rename.
    pub fn store_crop(
        &self,
        doc_id: &str,
        index: u32,
        k: usize,
        png: &[u8],
    ) -> Result<PathBuf, ToolError> {
        let path = self.crop_cache_path(doc_id, index, k);
        write_atomic(&path, png)?;
        Ok(path)
    }

    pub fn ocr_page(&self, doc: &Document, page: &PageRecord) -> Result<String, ToolError> {
        match self.cfg.mode {
            ToolMode::Cached => {
                if let Some(text) = &page.ocr_text {
                    return Ok(text.clone());
                }
                let cached = self.ocr_cache_path(&doc.doc_id, page.index);
                match fs::read_to_string(&cached) {
                    Ok(text) => Ok(text),
                    Err(_) => Err(ToolError::ToolUnavailable(format!(
                        "no cached OCR text for page {}",
                        page.index
                    ))),
                }
            }
            ToolMode::Http => {
                let body = doc.read_image_bytes(page).map_err(io_or_unavailable)?;
                let text = self.post("ocr", page.image_mime(), &body)?;
                write_atomic(&self.ocr_cache_path(&doc.doc_id, page.index), text.as_bytes())?;
                Ok(text)
            }
            ToolMode::Mock => Ok(mock_ocr(&doc.doc_id, page.index)),
        }
    }

    pub fn detect_layout(
        &self,
        doc: &Document,
        page: &PageRecord,
    ) -> Result<LayoutManifest, ToolError> {
        match self.cfg.mode {
            ToolMode::Cached => {
                let cached = self.layout_cache_path(&doc.doc_id, page.index);
                if cached.is_file() {
                    let raw = fs::read_to_string(&cached)?;
                    return parse_layout(page, &raw);
                }
                let mut elements: Vec<VisualElement> = page
                    .elements
                    .iter()
                    .map(|e| VisualElement::new(e.kind, e.bbox))
                    .collect();
                sort_reading_order(&mut elements);
                Ok(LayoutManifest {
                    page_index: page.index,
                    elements,
                })
            }
            ToolMode::Http => {
                let body = doc.read_image_bytes(page).map_err(io_or_unavailable)?;
                let raw = self.post("layout", page.image_mime(), &body)?;
                let manifest = parse_layout(page, &raw)?;
                let json = serde_json::to_vec(&manifest).expect("layout manifest serializes");
                write_atomic(&self.layout_cache_path(&doc.doc_id, page.index), &json)?;
                Ok(manifest)
            }
            ToolMode::Mock => Ok(normalize_layout(
                page,
                mock_layout_blocks(&doc.doc_id, page),
            )),
        }
    }

    fn post(&self, route: &str, mime: &str, body: &[u8]) -> Result<String, ToolError> {
        let endpoint = self.cfg.endpoint.as_deref().unwrap_or_default();
        let url = format!("{}/{route}", endpoint.trim_end_matches('/'));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut resp = agent
            .post(&url)
            .header("Content-Type", mime)
            .send(body)
            .map_err(|e| ToolError::ToolUnavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ToolError::ToolProtocolError(format!("{url}: unreadable body: {e}")))?;
        match status {
            200..=299 => Ok(text),
            500..=599 | 429 => Err(ToolError::ToolUnavailable(format!("{url}: HTTP {status}"))),
            _ => Err(ToolError::ToolProtocolError(format!("{url}: HTTP {status}: {text}"))),
        }
    }
}

fn io_or_unavailable(e: crate::document::DocumentError) -> ToolError {
    ToolError::ToolUnavailable(format!("page image unreadable: {e}"))
}

fn parse_layout(page: &PageRecord, raw: &str) -> Result<LayoutManifest, ToolError> {
    let parsed: RawLayout = serde_json::from_str(raw)
        .map_err(|e| ToolError::ToolProtocolError(format!("layout response: {e}")))?;
    Ok(normalize_layout(page, parsed.elements))
}

fn sanitize(doc_id: &str) -> String {
    doc_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_start_matches('.')
        .to_string()
}

fn seed_bytes(doc_id: &str, index: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(doc_id.as_bytes());
    h.update([0]);
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// Deterministic OCR text for the mock backend.
pub fn mock_ocr(doc_id: &str, index: u32) -> String {
    let seed = seed_bytes(doc_id, index);
    format!(
        "## {doc_id} page {index}\n\nMock OCR text {}.\n",
        hex::encode(&seed[..4])
    )
}

/// Raw detector output for the mock backend: up to three visual blocks plus
/// one non-visual `text` block that normalization must drop.
pub fn mock_layout_blocks(doc_id: &str, page: &PageRecord) -> Vec<RawBlock> {
    let seed = seed_bytes(doc_id, page.index);
    let w = f64::from(page.width_px);
    let h = f64::from(page.height_px);
    let count = usize::from(seed[0] % 4);
    let kinds = ["table", "figure", "chart"];
    let mut blocks = vec![RawBlock {
        kind: "text".into(),
        bbox: [0.0, 0.0, w, (h / 10.0).max(1.0)],
    }];
    for i in 0..count {
        let b = &seed[1 + i * 5..6 + i * 5];
        let fx = |v: u8| f64::from(v) / 255.0;
        let x1 = (fx(b[1]) * 0.5 * w).floor();
        let y1 = (fx(b[2]) * 0.5 * h).floor();
        let x2 = (x1 + (0.2 + 0.3 * fx(b[3])) * w).min(w).floor();
        let y2 = (y1 + (0.2 + 0.3 * fx(b[4])) * h).min(h).floor();
        blocks.push(RawBlock {
            kind: kinds[usize::from(b[0]) % 3].into(),
            bbox: [x1, y1, x2, y2],
        });
    }
    blocks
}
