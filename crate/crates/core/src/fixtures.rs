//! Synthetic bundle generation for tests, demos and golden fixtures.
//!
//! Page rasters are deterministic: a per-page background shade with each
//! declared element painted as a solid block, so crops carry recognizable
//! pixels.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde_json::json;

#[derive(Debug, Clone)]
pub struct FixturePage {
    pub index: i64,
    pub width: u32,
    pub height: u32,
    pub ocr: Option<String>,
    /// `(kind, [x1, y1, x2, y2])`. Kinds are written verbatim so invalid
    /// manifests can be produced too.
    pub elements: Vec<(&'static str, [f64; 4])>,
}

impl FixturePage {
    pub fn new(index: i64, width: u32, height: u32) -> Self {
        FixturePage {
            index,
            width,
            height,
            ocr: Some(format!("## Page {index}\n\nBody text of page {index}.\n")),
            elements: Vec::new(),
        }
    }

    /// `n` small pages with OCR text and no elements.
    pub fn simple_set(n: i64) -> Vec<FixturePage> {
        (1..=n).map(|i| FixturePage::new(i, 120, 160)).collect()
    }
}

/// Renders the raster for a fixture page.
pub fn render_page(page: &FixturePage) -> RgbImage {
    let shade = (page.index.rem_euclid(16) * 8) as u8;
    let mut img = RgbImage::from_pixel(page.width, page.height, Rgb([240 - shade, 240, 235]));
    // Thin rules every 10px so crops are never uniform.
    for y in (0..page.height).step_by(10) {
        for x in 0..page.width {
            img.put_pixel(x, y, Rgb([200, 200 - shade, 200]));
        }
    }
    for (k, (kind, b)) in page.elements.iter().enumerate() {
        let color = match *kind {
            "table" => Rgb([30, 90, 200]),
            "chart" => Rgb([200, 60, 40]),
            "figure" => Rgb([40, 160, 70]),
            _ => Rgb([90, 90, 90]),
        };
        let x1 = b[0].max(0.0).round() as u32;
        let y1 = b[1].max(0.0).round() as u32;
        let x2 = (b[2].round() as u32).min(page.width);
        let y2 = (b[3].round() as u32).min(page.height);
        for y in y1..y2 {
            for x in x1..x2 {
                let Rgb::<u8>([r, g, bl]) = color;
                let t = ((x + y) % 7) as u8 * 3 + k as u8;
                img.put_pixel(x, y, Rgb([r.saturating_add(t), g, bl.saturating_sub(t)]));
            }
        }
    }
    img
}

/// Writes a bundle with `pages/p{i}.png`, `ocr/p{i}.md` and `manifest.json`.
pub fn write_bundle_fixture(dir: &Path, doc_id: &str, pages: &[FixturePage]) {
    fs::create_dir_all(dir.join("pages")).expect("create pages dir");
    fs::create_dir_all(dir.join("ocr")).expect("create ocr dir");
    let mut entries = Vec::new();
    for page in pages {
        let image_rel = format!("pages/p{}.png", page.index);
        render_page(page)
            .save(dir.join(&image_rel))
            .expect("write page raster");
        let ocr_rel = page.ocr.as_ref().map(|text| {
            let rel = format!("ocr/p{}.md", page.index);
            fs::write(dir.join(&rel), text).expect("write ocr text");
            rel
        });
        let elements: Vec<_> = page
            .elements
            .iter()
            .map(|(kind, b)| json!({"kind": kind, "bbox": b}))
            .collect();
        entries.push(json!({
            "index": page.index,
            "image": image_rel,
            "width_px": page.width,
            "height_px": page.height,
            "ocr_text": ocr_rel,
            "elements": elements,
        }));
    }
    let manifest = json!({"doc_id": doc_id, "pages": entries});
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest json"),
    )
    .expect("write manifest");
}
