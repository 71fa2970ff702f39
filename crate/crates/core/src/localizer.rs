//! Evidence assembly: each predicted page with its OCR text and cropped
//! tables, figures and charts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{Document, DocumentError, ElementKind, PageRecord, VisualElement};
use crate::navigator::PageTexts;
use crate::par::map_ordered;
use crate::tools::{crop_element, encode_png, ParsingTools, ToolError};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("page {index} is outside 1..={page_count}")]
    PageOutOfRange { index: u32, page_count: u32 },
    #[error("page {page}: {source}")]
    Tool {
        page: u32,
        #[source]
        source: ToolError,
    },
    #[error(transparent)]
    Document(#[from] DocumentError),
}

/// One cropped element. `element_number` is the 1-based position in the
/// page's layout manifest; `ordinal` counts elements of the same kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub element_number: u32,
    pub element: VisualElement,
    pub ordinal: u32,
    pub caption: String,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub png: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropFailure {
    pub element_number: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub page_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub crops: Vec<Crop>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<CropFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub question: String,
    pub items: Vec<EvidenceItem>,
}

impl EvidenceSet {
    pub fn page_indices(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.page_index).collect()
    }

    pub fn crop_count(&self) -> usize {
        self.items.iter().map(|i| i.crops.len()).sum()
    }
}

pub fn crop_caption(page_index: u32, kind: ElementKind, ordinal: u32) -> String {
    format!("Page {page_index}, {kind} {ordinal}")
}

/// Detects and crops every visual element on one page. Individual crop
/// failures are recorded on the item; layout detection errors propagate.
pub fn localize_page(
    doc: &Document,
    page: &PageRecord,
    text: Option<String>,
    tools: &ParsingTools,
) -> Result<EvidenceItem, LocalizeError> {
    let tool_err = |source| LocalizeError::Tool {
        page: page.index,
        source,
    };
    let layout = tools.detect_layout(doc, page).map_err(tool_err)?;
    let mut crops = Vec::new();
    let mut failures = Vec::new();
    if !layout.elements.is_empty() {
        let raster = doc.decode_image(page)?;
        let mut per_kind = [0u32; 3];
        for (i, element) in layout.elements.into_iter().enumerate() {
            let element_number = i as u32 + 1;
            let slot = &mut per_kind[element.kind as usize];
            *slot += 1;
            let ordinal = *slot;
            let cropped = crop_element(page, &raster, &element.bbox).and_then(|img| {
                let png = encode_png(&img)?;
                Ok((img.width(), img.height(), png))
            });
            match cropped {
                Ok((width, height, png)) => crops.push(Crop {
                    element_number,
                    caption: crop_caption(page.index, element.kind, ordinal),
                    element,
                    ordinal,
                    width,
                    height,
                    png,
                }),
                Err(e) => {
                    tracing::warn!(page = page.index, element = element_number, "crop failed: {e}");
                    failures.push(CropFailure {
                        element_number,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(EvidenceItem {
        page_index: page.index,
        text,
        crops,
        failures,
    })
}

/// Builds the evidence set for `e_pred` in ascending page order.
pub fn localize(
    doc: &Document,
    question: &str,
    e_pred: &BTreeSet<u32>,
    texts: &PageTexts,
    tools: &ParsingTools,
    max_threads: usize,
) -> Result<EvidenceSet, LocalizeError> {
    let n = doc.page_count();
    if let Some(&bad) = e_pred.iter().find(|&&p| p == 0 || p > n) {
        return Err(LocalizeError::PageOutOfRange {
            index: bad,
            page_count: n,
        });
    }
    let pages: Vec<u32> = e_pred.iter().copied().collect();
    let items = map_ordered(&pages, max_threads, |&index| {
        let page = doc.get_page(i64::from(index))?;
        localize_page(doc, page, texts.get(&index).cloned(), tools)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(EvidenceSet {
        question: question.to_string(),
        items,
    })
}

/// Evidence made of every page with its text and no crops.
pub fn whole_document_evidence(doc: &Document, question: &str, texts: &PageTexts) -> EvidenceSet {
    EvidenceSet {
        question: question.to_string(),
        items: doc
            .pages()
            .iter()
            .map(|p| EvidenceItem {
                page_index: p.index,
                text: texts.get(&p.index).cloned(),
                crops: Vec::new(),
                failures: Vec::new(),
            })
            .collect(),
    }
}

/// Re-derives the crop for element `element_number` on a page. Used to serve
/// crops without keeping PNG bytes around.
pub fn crop_for(
    doc: &Document,
    page_index: u32,
    element_number: u32,
    tools: &ParsingTools,
) -> Result<Option<Crop>, LocalizeError> {
    let page = doc.get_page(i64::from(page_index))?;
    let item = localize_page(doc, page, None, tools)?;
    Ok(item
        .crops
        .into_iter()
        .find(|c| c.element_number == element_number))
}
