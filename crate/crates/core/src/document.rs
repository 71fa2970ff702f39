//! Document bundles: a page-indexed set of rasters, optional OCR Markdown and
//! detected visual elements, loaded from a `manifest.json` directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("no {MANIFEST_FILE} found in {0}")]
    MissingManifest(PathBuf),
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    ManifestParse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("page {page}: invalid field `{field}`: {reason}")]
    InvalidField {
        page: i64,
        field: &'static str,
        reason: String,
    },
    #[error("document has no pages")]
    EmptyDocument,
    #[error("page index {0} is missing; indices must be contiguous from 1")]
    PageGap(u32),
    #[error("page index {0} appears more than once")]
    DuplicatePage(u32),
    #[error("page {page}, element {element}: bounding box has zero or negative area")]
    DegenerateBBox { page: u32, element: usize },
    #[error("page {page}, element {element}: bounding box lies outside the page")]
    BBoxOutOfBounds { page: u32, element: usize },
    #[error("page {page}: image {path} not found")]
    MissingImage { page: u32, path: PathBuf },
    #[error("page {page}: image is {actual_w}x{actual_h}, manifest says {width_px}x{height_px}")]
    DimensionMismatch {
        page: u32,
        width_px: u32,
        height_px: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("page {page}: OCR file {path} not found")]
    MissingOcr { page: u32, path: PathBuf },
    #[error("page index {index} out of range 1..={page_count}")]
    IndexOutOfRange { index: i64, page_count: u32 },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Visual layout element kinds. Plain text, titles and other non-visual blocks
/// are never represented as elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Table,
    Figure,
    Chart,
}

impl ElementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Table => "table",
            ElementKind::Figure => "figure",
            ElementKind::Chart => "chart",
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a visual element kind: {0:?}")]
pub struct UnknownKind(pub String);

impl FromStr for ElementKind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" => Ok(ElementKind::Table),
            "figure" | "image" => Ok(ElementKind::Figure),
            "chart" => Ok(ElementKind::Chart),
            _ => Err(UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BBoxError {
    #[error("bounding box coordinates must be finite")]
    NonFinite,
    #[error("bounding box must satisfy x1 < x2 and y1 < y2")]
    Degenerate,
}

/// Pixel-space rectangle, origin top-left. Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BBoxError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(BBoxError::NonFinite);
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(BBoxError::Degenerate);
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// The box covering a whole `width` x `height` page.
    pub fn full_page(width: u32, height: u32) -> Self {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: f64::from(width.max(1)),
            y2: f64::from(height.max(1)),
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_within(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= f64::from(width)
            && self.y2 <= f64::from(height)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = BBoxError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualElement {
    pub kind: ElementKind,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_ref: Option<PathBuf>,
}

impl VisualElement {
    pub fn new(kind: ElementKind, bbox: BBox) -> Self {
        VisualElement {
            kind,
            bbox,
            crop_ref: None,
        }
    }
}

/// One page of a bundle. Paths are relative to the bundle root.
#[derive(Debug, Clone, PartialEq)]
pub struct PageRecord {
    pub index: u32,
    pub image_ref: PathBuf,
    pub width_px: u32,
    pub height_px: u32,
    /// `None` means no OCR text was supplied, which is distinct from a blank page.
    pub ocr_text: Option<String>,
    pub ocr_ref: Option<PathBuf>,
    pub elements: Vec<VisualElement>,
}

impl PageRecord {
    pub fn image_mime(&self) -> &'static str {
        mime_for_path(&self.image_ref)
    }
}

pub fn mime_for_path(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    }
}

/// A loaded, validated bundle. Immutable after load.
#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    root: PathBuf,
    pages: Vec<PageRecord>,
}

impl Document {
    /// Builds a document from already-validated parts. Used by tests and
    /// converters; `load_document` is the validating entry point.
    pub fn from_parts(
        doc_id: impl Into<String>,
        root: impl Into<PathBuf>,
        pages: Vec<PageRecord>,
    ) -> Result<Self, DocumentError> {
        let manifest = Manifest {
            doc_id: doc_id.into(),
            pages: pages.iter().map(ManifestPage::from_record).collect(),
        };
        let root = root.into();
        let mut doc = validate(manifest, &root, false)?;
        for (slot, page) in doc.pages.iter_mut().zip(sorted_by_index(pages)) {
            slot.ocr_text = page.ocr_text;
        }
        Ok(doc)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn page_count(&self) -> u32 {
        self.pages.len() as u32
    }

    pub fn pages(&self) -> &[PageRecord] {
        &self.pages
    }

    pub fn get_page(&self, index: i64) -> Result<&PageRecord, DocumentError> {
        if index < 1 || index > i64::from(self.page_count()) {
            return Err(DocumentError::IndexOutOfRange {
                index,
                page_count: self.page_count(),
            });
        }
        Ok(&self.pages[(index - 1) as usize])
    }

    pub fn image_path(&self, page: &PageRecord) -> PathBuf {
        self.root.join(&page.image_ref)
    }

    pub fn read_image_bytes(&self, page: &PageRecord) -> Result<Vec<u8>, DocumentError> {
        Ok(fs::read(self.image_path(page))?)
    }

    pub fn decode_image(&self, page: &PageRecord) -> Result<image::DynamicImage, DocumentError> {
        Ok(image::open(self.image_path(page))?)
    }

    /// Content equality ignoring where the bundle lives on disk.
    pub fn same_content(&self, other: &Document) -> bool {
        self.doc_id == other.doc_id && self.pages == other.pages
    }

    pub fn manifest_json(&self) -> serde_json::Value {
        let manifest = Manifest {
            doc_id: self.doc_id.clone(),
            pages: self.pages.iter().map(ManifestPage::from_record).collect(),
        };
        serde_json::to_value(manifest).expect("manifest is always serializable")
    }

    /// Writes the bundle (manifest, images, OCR files) under `dest`, keeping
    /// relative paths. The result loads back to an equal document.
    pub fn write_bundle(&self, dest: &Path) -> Result<(), DocumentError> {
        fs::create_dir_all(dest)?;
        for page in &self.pages {
            copy_into(&self.root.join(&page.image_ref), &dest.join(&page.image_ref))?;
            if let (Some(rel), Some(text)) = (&page.ocr_ref, &page.ocr_text) {
                let target = dest.join(rel);
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(target, text)?;
            }
        }
        let json = serde_json::to_string_pretty(&self.manifest_json())
            .expect("manifest is always serializable");
        fs::write(dest.join(MANIFEST_FILE), json)?;
        Ok(())
    }
}

fn copy_into(src: &Path, dst: &Path) -> std::io::Result<()> {
    if src == dst {
        return Ok(());
    }
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::copy(src, dst).map(|_| ())
}

fn sorted_by_index(mut pages: Vec<PageRecord>) -> Vec<PageRecord> {
    pages.sort_by_key(|p| p.index);
    pages
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    doc_id: String,
    pages: Vec<ManifestPage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestPage {
    index: i64,
    image: String,
    width_px: i64,
    height_px: i64,
    #[serde(default)]
    ocr_text: Option<String>,
    #[serde(default)]
    elements: Vec<ManifestElement>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestElement {
    kind: String,
    bbox: [f64; 4],
}

impl ManifestPage {
    fn from_record(page: &PageRecord) -> Self {
        ManifestPage {
            index: i64::from(page.index),
            image: path_to_manifest(&page.image_ref),
            width_px: i64::from(page.width_px),
            height_px: i64::from(page.height_px),
            ocr_text: page.ocr_ref.as_deref().map(path_to_manifest),
            elements: page
                .elements
                .iter()
                .map(|e| ManifestElement {
                    kind: e.kind.as_str().to_string(),
                    bbox: e.bbox.coords(),
                })
                .collect(),
        }
    }
}

fn path_to_manifest(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Loads and validates the bundle rooted at `bundle_path`.
pub fn load_document(bundle_path: impl AsRef<Path>) -> Result<Document, DocumentError> {
    let root = bundle_path.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let raw = match fs::read_to_string(&manifest_path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DocumentError::MissingManifest(root.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| DocumentError::ManifestParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    validate(manifest, root, true)
}

fn relative_path(page: i64, field: &'static str, raw: &str) -> Result<PathBuf, DocumentError> {
    let path = PathBuf::from(raw);
    let clean = !raw.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !clean {
        return Err(DocumentError::InvalidField {
            page,
            field,
            reason: format!("{raw:?} must be a relative path inside the bundle"),
        });
    }
    Ok(path)
}

fn positive_u32(page: i64, field: &'static str, v: i64) -> Result<u32, DocumentError> {
    u32::try_from(v)
        .ok()
        .filter(|v| *v > 0)
        .ok_or_else(|| DocumentError::InvalidField {
            page,
            field,
            reason: format!("{v} is not a positive integer"),
        })
}

fn validate(manifest: Manifest, root: &Path, check_files: bool) -> Result<Document, DocumentError> {
    if manifest.pages.is_empty() {
        return Err(DocumentError::EmptyDocument);
    }
    let mut pages = Vec::with_capacity(manifest.pages.len());
    for mp in manifest.pages {
        let index = positive_u32(mp.index, "index", mp.index)?;
        let width_px = positive_u32(mp.index, "width_px", mp.width_px)?;
        let height_px = positive_u32(mp.index, "height_px", mp.height_px)?;
        let image_ref = relative_path(mp.index, "image", &mp.image)?;
        let ocr_ref = mp
            .ocr_text
            .as_deref()
            .map(|p| relative_path(mp.index, "ocr_text", p))
            .transpose()?;

        let mut elements = Vec::with_capacity(mp.elements.len());
        for (k, me) in mp.elements.into_iter().enumerate() {
            let element = k + 1;
            let kind = me
                .kind
                .parse::<ElementKind>()
                .map_err(|e| DocumentError::InvalidField {
                    page: mp.index,
                    field: "elements.kind",
                    reason: e.to_string(),
                })?;
            let bbox = BBox::try_from(me.bbox).map_err(|_| DocumentError::DegenerateBBox {
                page: index,
                element,
            })?;
            if !bbox.is_within(width_px, height_px) {
                return Err(DocumentError::BBoxOutOfBounds {
                    page: index,
                    element,
                });
            }
            elements.push(VisualElement::new(kind, bbox));
        }

        pages.push(PageRecord {
            index,
            image_ref,
            width_px,
            height_px,
            ocr_text: None,
            ocr_ref,
            elements,
        });
    }

    pages.sort_by_key(|p| p.index);
    let mut seen = BTreeSet::new();
    for p in &pages {
        if !seen.insert(p.index) {
            return Err(DocumentError::DuplicatePage(p.index));
        }
    }
    for (expected, p) in (1u32..).zip(&pages) {
        if p.index != expected {
            return Err(DocumentError::PageGap(expected));
        }
    }

    if check_files {
        for page in &mut pages {
            let image_path = root.join(&page.image_ref);
            if !image_path.is_file() {
                return Err(DocumentError::MissingImage {
                    page: page.index,
                    path: image_path,
                });
            }
            let (actual_w, actual_h) = image::image_dimensions(&image_path)?;
            if (actual_w, actual_h) != (page.width_px, page.height_px) {
                return Err(DocumentError::DimensionMismatch {
                    page: page.index,
                    width_px: page.width_px,
                    height_px: page.height_px,
                    actual_w,
                    actual_h,
                });
            }
            if let Some(rel) = &page.ocr_ref {
                let path = root.join(rel);
                match fs::read_to_string(&path) {
                    Ok(text) => page.ocr_text = Some(text),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                        return Err(DocumentError::MissingOcr {
                            page: page.index,
                            path,
                        })
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }

    Ok(Document {
        doc_id: manifest.doc_id,
        root: root.to_path_buf(),
        pages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{write_bundle_fixture, FixturePage};

    #[test]
    fn loads_contiguous_bundle() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle_fixture(dir.path(), "doc-5", &FixturePage::simple_set(5));
        let doc = load_document(dir.path()).unwrap();
        assert_eq!(doc.page_count(), 5);
        assert_eq!(doc.doc_id, "doc-5");
        assert!(doc.get_page(2).unwrap().ocr_text.is_some());
    }

    #[test]
    fn page_gap_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(4);
        pages.remove(2);
        write_bundle_fixture(dir.path(), "gap", &pages);
        match load_document(dir.path()) {
            Err(DocumentError::PageGap(3)) => {}
            other => panic!("expected PageGap(3), got {other:?}"),
        }
    }

    #[test]
    fn duplicate_page_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(2);
        pages[1].index = 1;
        write_bundle_fixture(dir.path(), "dup", &pages);
        assert!(matches!(
            load_document(dir.path()),
            Err(DocumentError::DuplicatePage(1))
        ));
    }

    #[test]
    fn bbox_out_of_bounds_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(1);
        pages[0].width = 1000;
        pages[0].height = 800;
        pages[0].elements = vec![("table", [10.0, 10.0, 5000.0, 20.0])];
        write_bundle_fixture(dir.path(), "oob", &pages);
        assert!(matches!(
            load_document(dir.path()),
            Err(DocumentError::BBoxOutOfBounds { page: 1, element: 1 })
        ));
    }

    #[test]
    fn zero_area_bbox_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(1);
        pages[0].elements = vec![("chart", [10.0, 10.0, 10.0, 20.0])];
        write_bundle_fixture(dir.path(), "zero", &pages);
        assert!(matches!(
            load_document(dir.path()),
            Err(DocumentError::DegenerateBBox { page: 1, element: 1 })
        ));
    }

    #[test]
    fn text_kind_is_not_a_visual_element() {
        let dir = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(1);
        pages[0].elements = vec![("text", [1.0, 1.0, 10.0, 10.0])];
        write_bundle_fixture(dir.path(), "txt", &pages);
        assert!(matches!(
            load_document(dir.path()),
            Err(DocumentError::InvalidField {
                field: "elements.kind",
                ..
            })
        ));
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_document(dir.path()),
            Err(DocumentError::MissingManifest(_))
        ));
    }

    #[test]
    fn malformed_manifest_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\n  \"doc_id\": \"x\",\n  \"pages\": [\n").unwrap();
        match load_document(dir.path()) {
            Err(DocumentError::ManifestParse { line, .. }) => assert!(line >= 3),
            other => panic!("expected ManifestParse, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle_fixture(dir.path(), "img", &FixturePage::simple_set(2));
        fs::remove_file(dir.path().join("pages/p2.png")).unwrap();
        assert!(matches!(
            load_document(dir.path()),
            Err(DocumentError::MissingImage { page: 2, .. })
        ));
    }

    #[test]
    fn path_escape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"doc_id":"x","pages":[{"index":1,"image":"../etc/p.png","width_px":10,"height_px":10,"ocr_text":null,"elements":[]}]}"#;
        fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
        assert!(matches!(
            load_document(dir.path()),
            Err(DocumentError::InvalidField { field: "image", .. })
        ));
    }

    #[test]
    fn absent_ocr_stays_absent() {
        let dir = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(2);
        pages[1].ocr = None;
        pages[0].ocr = Some(String::new());
        write_bundle_fixture(dir.path(), "ocr", &pages);
        let doc = load_document(dir.path()).unwrap();
        assert_eq!(doc.get_page(1).unwrap().ocr_text.as_deref(), Some(""));
        assert_eq!(doc.get_page(2).unwrap().ocr_text, None);
    }

    #[test]
    fn get_page_bounds() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle_fixture(dir.path(), "d", &FixturePage::simple_set(5));
        let doc = load_document(dir.path()).unwrap();
        assert_eq!(doc.get_page(3).unwrap().index, 3);
        assert!(matches!(
            doc.get_page(0),
            Err(DocumentError::IndexOutOfRange { index: 0, page_count: 5 })
        ));
        assert!(matches!(
            doc.get_page(6),
            Err(DocumentError::IndexOutOfRange { index: 6, .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let src = tempfile::tempdir().unwrap();
        let mut pages = FixturePage::simple_set(3);
        pages[1].elements = vec![("chart", [5.0, 5.0, 50.5, 40.25]), ("table", [0.0, 60.0, 80.0, 90.0])];
        pages[2].ocr = None;
        write_bundle_fixture(src.path(), "rt", &pages);
        let doc = load_document(src.path()).unwrap();
        let dst = tempfile::tempdir().unwrap();
        doc.write_bundle(dst.path()).unwrap();
        let again = load_document(dst.path()).unwrap();
        assert!(doc.same_content(&again));
    }

    #[test]
    fn bbox_serializes_as_array() {
        let b = BBox::new(1.0, 2.0, 3.5, 4.0).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.5,4.0]");
        assert!(serde_json::from_str::<BBox>("[3,2,1,4]").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_element(w: u32, h: u32) -> impl Strategy<Value = (&'static str, [f64; 4])> {
            (
                prop::sample::select(vec!["table", "figure", "chart"]),
                0.0..f64::from(w),
                0.0..f64::from(h),
                0.0..f64::from(w),
                0.0..f64::from(h),
            )
                .prop_map(|(k, a, b, c, d)| (k, [a, b, c, d]))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn loaded_elements_are_always_in_bounds(
                els in prop::collection::vec(arb_element(64, 48), 0..6)
            ) {
                let dir = tempfile::tempdir().unwrap();
                let mut pages = FixturePage::simple_set(1);
                pages[0].width = 64;
                pages[0].height = 48;
                pages[0].elements = els;
                write_bundle_fixture(dir.path(), "p", &pages);
                if let Ok(doc) = load_document(dir.path()) {
                    for page in doc.pages() {
                        for e in &page.elements {
                            prop_assert!(e.bbox.is_within(page.width_px, page.height_px));
                            prop_assert!(e.bbox.area() > 0.0);
                        }
                    }
                }
            }
        }
    }
}
