use std::io::Cursor;

use image::ImageReader;
use sha2::{Digest, Sha256};

use super::GatewayError;

/// An encoded image part. `label` is a short caption that wire encoders emit
/// as text immediately before the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub bytes: Vec<u8>,
    pub mime: String,
    pub width: u32,
    pub height: u32,
    pub label: Option<String>,
}

impl ImageData {
    /// Wraps already-encoded bytes, reading dimensions from the header.
    pub fn from_encoded(bytes: Vec<u8>, mime: impl Into<String>) -> Result<Self, GatewayError> {
        let (width, height) = ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| GatewayError::InvalidRequest(format!("unreadable image: {e}")))?
            .into_dimensions()
            .map_err(|e| GatewayError::InvalidRequest(format!("unreadable image: {e}")))?;
        Ok(ImageData {
            bytes,
            mime: mime.into(),
            width,
            height,
            label: None,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn pixels(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Image(ImageData),
    Text(String),
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Part::Text(t) => Some(t),
            Part::Image(_) => None,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Part::Image(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub system_prompt: String,
    pub parts: Vec<Part>,
    pub temperature: f64,
    pub candidate_count: u32,
}

impl ModelRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.parts.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no parts".into()));
        }
        if self.candidate_count == 0 {
            return Err(GatewayError::InvalidRequest("candidate_count must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| p.is_image()).count()
    }

    pub fn total_pixels(&self) -> u64 {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Image(img) => img.pixels(),
                Part::Text(_) => 0,
            })
            .sum()
    }
}

fn put_bytes(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

/// Stable content hash over everything that determines a model's output
/// distribution: system prompt, part kinds and order, text and image bytes,
/// temperature and candidate count.
pub fn fingerprint(req: &ModelRequest) -> String {
    let mut h = Sha256::new();
    h.update(b"doclens-request-v1");
    put_bytes(&mut h, req.system_prompt.as_bytes());
    h.update((req.parts.len() as u64).to_le_bytes());
    for part in &req.parts {
        match part {
            Part::Text(t) => {
                h.update(b"T");
                put_bytes(&mut h, t.as_bytes());
            }
            Part::Image(img) => {
                h.update(b"I");
                put_bytes(&mut h, img.mime.as_bytes());
                h.update(img.width.to_le_bytes());
                h.update(img.height.to_le_bytes());
                match &img.label {
                    Some(l) => {
                        h.update(b"L");
                        put_bytes(&mut h, l.as_bytes());
                    }
                    None => h.update(b"-"),
                }
                put_bytes(&mut h, &img.bytes);
            }
        }
    }
    h.update(req.temperature.to_bits().to_le_bytes());
    h.update(req.candidate_count.to_le_bytes());
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png(w: u32, h: u32, shade: u8) -> ImageData {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::from_pixel(w, h, image::Rgb([shade, 0, 0])));
        let bytes = crate::tools::encode_png(&img).unwrap();
        ImageData::from_encoded(bytes, "image/png").unwrap()
    }

    fn req() -> ModelRequest {
        ModelRequest {
            system_prompt: "sys".into(),
            parts: vec![Part::text("q"), Part::Image(png(4, 3, 1)), Part::text("ocr")],
            temperature: 0.7,
            candidate_count: 8,
        }
    }

    #[test]
    fn reads_dimensions() {
        let img = png(17, 5, 0);
        assert_eq!((img.width, img.height), (17, 5));
    }

    #[test]
    fn identical_requests_share_fingerprint() {
        assert_eq!(fingerprint(&req()), fingerprint(&req()));
    }

    #[test]
    fn fingerprint_sees_every_component() {
        let base = fingerprint(&req());
        let mut r = req();
        r.parts[2] = Part::text("ocr!");
        assert_ne!(fingerprint(&r), base);

        let mut r = req();
        r.parts[1] = Part::Image(png(4, 3, 2));
        assert_ne!(fingerprint(&r), base);

        let mut r = req();
        r.parts.swap(0, 2);
        assert_ne!(fingerprint(&r), base);

        let mut r = req();
        r.temperature = 0.0;
        assert_ne!(fingerprint(&r), base);

        let mut r = req();
        r.candidate_count = 1;
        assert_ne!(fingerprint(&r), base);

        let mut r = req();
        r.system_prompt.push(' ');
        assert_ne!(fingerprint(&r), base);

        // Text/text boundary is unambiguous.
        let a = ModelRequest { parts: vec![Part::text("ab"), Part::text("c")], ..req() };
        let b = ModelRequest { parts: vec![Part::text("a"), Part::text("bc")], ..req() };
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn validation() {
        assert!(req().validate().is_ok());
        assert!(ModelRequest { parts: vec![], ..req() }.validate().is_err());
        assert!(ModelRequest { candidate_count: 0, ..req() }.validate().is_err());
        assert!(ModelRequest { temperature: -0.1, ..req() }.validate().is_err());
    }
}
