//! Detector outputs, semantic crops and byte accounting.
//!
//! A [`DetectionSet`] is what the detector reports for one image. Detection
//! order is load order and defines the object index used by every later stage
//! (allocation, channel, scoring).

use std::fs;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default confidence threshold: detections below it are not reported.
pub const DEFAULT_C_MIN: f64 = 0.25;

/// Axis-aligned box in integer pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Clamp a possibly out-of-range box to `width` x `height`. Returns
    /// `None` when nothing of the box survives.
    pub fn clamp(x: i64, y: i64, w: i64, h: i64, width: u32, height: u32) -> Option<BBox> {
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x.saturating_add(w)).min(width as i64);
        let y1 = (y.saturating_add(h)).min(height as i64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(BBox::new(
            x0 as u32,
            y0 as u32,
            (x1 - x0) as u32,
            (y1 - y0) as u32,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    /// Number of detected objects (`U`).
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.confidence).collect()
    }

    /// Keep only the first `n` detections.
    pub fn truncated(&self, n: usize) -> DetectionSet {
        DetectionSet {
            detections: self.detections.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

// Wire format of the detections file.
#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    image_id: String,
    width: u32,
    height: u32,
    detections: Vec<DetectionEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionEntry {
    bbox: [i64; 4],
    confidence: f64,
    class_id: u32,
}

/// Load a detections file, dropping detections with `confidence < c_min`.
pub fn load_detections(path: impl AsRef<Path>, c_min: f64) -> Result<Vec<DetectionSet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string(), c_min)
}

/// Parse detections JSON text. `origin` names the source in error messages.
pub fn parse_detections(text: &str, origin: &str, c_min: f64) -> Result<Vec<DetectionSet>> {
    let entries: Vec<ImageEntry> = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    entries
        .into_iter()
        .map(|entry| validate_entry(entry, c_min))
        .collect()
}

fn validate_entry(entry: ImageEntry, c_min: f64) -> Result<DetectionSet> {
    let invalid = |message: String| Error::Validation {
        image_id: entry.image_id.clone(),
        message,
    };
    if entry.width == 0 || entry.height == 0 {
        return Err(invalid(format!(
            "image size {}x{} is empty",
            entry.width, entry.height
        )));
    }

    let mut detections = Vec::with_capacity(entry.detections.len());
    for (k, det) in entry.detections.iter().enumerate() {
        if !det.confidence.is_finite() || det.confidence > 1.0 {
            return Err(invalid(format!(
                "detection {k}: confidence {} outside [0, 1]",
                det.confidence
            )));
        }
        if det.confidence < c_min {
            continue;
        }
        let [x, y, w, h] = det.bbox;
        let bbox = BBox::clamp(x, y, w, h, entry.width, entry.height).ok_or_else(|| {
            invalid(format!(
                "detection {k}: bbox [{x}, {y}, {w}, {h}] lies outside the {}x{} image",
                entry.width, entry.height
            ))
        })?;
        detections.push(Detection {
            bbox,
            confidence: det.confidence,
            class_id: det.class_id,
        });
    }

    Ok(DetectionSet {
        image_id: entry.image_id.clone(),
        image_width: entry.width,
        image_height: entry.height,
        detections,
    })
}

/// Serialize detection sets back to the detections-JSON wire format.
pub fn detections_to_json(sets: &[DetectionSet]) -> Result<String> {
    let entries: Vec<ImageEntry> = sets
        .iter()
        .map(|s| ImageEntry {
            image_id: s.image_id.clone(),
            width: s.image_width,
            height: s.image_height,
            detections: s
                .detections
                .iter()
                .map(|d| DetectionEntry {
                    bbox: [
                        d.bbox.x as i64,
                        d.bbox.y as i64,
                        d.bbox.w as i64,
                        d.bbox.h as i64,
                    ],
                    confidence: d.confidence,
                    class_id: d.class_id,
                })
                .collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&entries)?)
}

/// A semantic crop: the exact pixel rectangle of one detection, RGB8 row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crop {
    pixels: Vec<u8>,
    width: u32,
    height: u32,
    source_bbox: BBox,
}

impl Crop {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, source_bbox: BBox) -> Result<Self> {
        let expected = 3 * width as usize * height as usize;
        if pixels.len() != expected || width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "crop {width}x{height} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            width,
            height,
            source_bbox,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn source_bbox(&self) -> BBox {
        self.source_bbox
    }

    /// Payload size in bits when sent as a raw RGB8 bitstream.
    pub fn bit_len(&self) -> u64 {
        self.pixels.len() as u64 * 8
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("crop buffer length is checked at construction")
    }
}

/// Cut the detection's box out of `image`, at native resolution.
pub fn extract_crop(image: &RgbImage, det: &Detection) -> Result<Crop> {
    let b = det.bbox;
    let clamped = BBox::clamp(
        b.x as i64,
        b.y as i64,
        b.w as i64,
        b.h as i64,
        image.width(),
        image.height(),
    )
    .ok_or(Error::DegenerateCrop {
        x: b.x as i64,
        y: b.y as i64,
        w: b.w as i64,
        h: b.h as i64,
        width: image.width(),
        height: image.height(),
    })?;

    let stride = 3 * image.width() as usize;
    let raw = image.as_raw();
    let row_len = 3 * clamped.w as usize;
    let mut pixels = Vec::with_capacity(row_len * clamped.h as usize);
    for row in clamped.y..clamped.y + clamped.h {
        let start = row as usize * stride + 3 * clamped.x as usize;
        pixels.extend_from_slice(&raw[start..start + row_len]);
    }
    Crop::new(clamped.w, clamped.h, pixels, clamped)
}

/// Crops for every detection of a set, in detection order.
pub fn extract_crops(image: &RgbImage, set: &DetectionSet) -> Result<Vec<Crop>> {
    if image.width() != set.image_width || image.height() != set.image_height {
        return Err(Error::Validation {
            image_id: set.image_id.clone(),
            message: format!(
                "raster is {}x{} but detections declare {}x{}",
                image.width(),
                image.height(),
                set.image_width,
                set.image_height
            ),
        });
    }
    set.detections
        .iter()
        .map(|d| extract_crop(image, d))
        .collect()
}

/// Importance weights `W_i = c_i^sigma`.
pub fn importance_weights(confidences: &[f64], sigma: f64) -> Vec<f64> {
    confidences.iter().map(|c| c.powf(sigma)).collect()
}

/// Load a PNG or JPEG raster as RGB8.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        name: path.display().to_string(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Find `<image_id>` (as given, or with a .png/.jpg/.jpeg suffix) in `dir`.
pub fn resolve_image_path(dir: &Path, image_id: &str) -> Option<std::path::PathBuf> {
    let direct = dir.join(image_id);
    if direct.is_file() {
        return Some(direct);
    }
    ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"]
        .iter()
        .map(|ext| dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

/// PNG-encode an RGB8 buffer and return the encoded size in bytes.
pub fn png_size(name: &str, width: u32, height: u32, rgb: &[u8]) -> Result<u64> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(rgb, width, height, ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image {
            name: name.to_string(),
            source,
        })?;
    Ok(out.len() as u64)
}

/// Byte counts for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBytes {
    pub image_id: String,
    pub objects: usize,
    /// PNG-encoded size of the full frame.
    pub original_bytes: u64,
    /// Sum of the PNG-encoded sizes of its crops.
    pub semantic_bytes: u64,
    /// Raw RGB8 size of the full frame (3·w·h).
    pub original_raw_bytes: u64,
    /// Sum of raw RGB8 crop sizes.
    pub semantic_raw_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub per_image: Vec<ImageBytes>,
    pub original_bytes: u64,
    pub semantic_bytes: u64,
    pub original_raw_bytes: u64,
    pub semantic_raw_bytes: u64,
    pub reduction_ratio: f64,
    pub raw_reduction_ratio: f64,
}

fn ratio(original: u64, semantic: u64) -> f64 {
    if original == 0 {
        0.0
    } else {
        1.0 - semantic as f64 / original as f64
    }
}

impl ReductionReport {
    pub fn from_rows(per_image: Vec<ImageBytes>) -> Self {
        let sum = |f: fn(&ImageBytes) -> u64| per_image.iter().map(f).sum::<u64>();
        let original_bytes = sum(|r| r.original_bytes);
        let semantic_bytes = sum(|r| r.semantic_bytes);
        let original_raw_bytes = sum(|r| r.original_raw_bytes);
        let semantic_raw_bytes = sum(|r| r.semantic_raw_bytes);
        Self {
            reduction_ratio: ratio(original_bytes, semantic_bytes),
            raw_reduction_ratio: ratio(original_raw_bytes, semantic_raw_bytes),
            per_image,
            original_bytes,
            semantic_bytes,
            original_raw_bytes,
            semantic_raw_bytes,
        }
    }

    /// Report over the concatenation of both image sets.
    pub fn merge(&self, other: &ReductionReport) -> ReductionReport {
        let mut rows = self.per_image.clone();
        rows.extend(other.per_image.iter().cloned());
        ReductionReport::from_rows(rows)
    }
}

/// Compare full-frame transmission against crop-only transmission.
///
/// `crops[k]` must hold the crops cut from `images[k]`; an image with no
/// crops contributes zero semantic bytes.
pub fn byte_accounting(images: &[(&str, &RgbImage)], crops: &[Vec<Crop>]) -> Result<ReductionReport> {
    if images.len() != crops.len() {
        return Err(Error::Dimension(format!(
            "{} images but {} crop groups",
            images.len(),
            crops.len()
        )));
    }
    let mut rows = Vec::with_capacity(images.len());
    for ((name, img), group) in images.iter().zip(crops) {
        let original_bytes = png_size(name, img.width(), img.height(), img.as_raw())?;
        let mut semantic_bytes = 0;
        for (k, c) in group.iter().enumerate() {
            semantic_bytes += png_size(&format!("{name}#{k}"), c.width(), c.height(), c.pixels())?;
        }
        rows.push(ImageBytes {
            image_id: name.to_string(),
            objects: group.len(),
            original_bytes,
            semantic_bytes,
            original_raw_bytes: img.as_raw().len() as u64,
            semantic_raw_bytes: group.iter().map(|c| c.pixels().len() as u64).sum(),
        });
    }
    Ok(ReductionReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, (x * 16 + y) as u8]))
    }

    fn det(x: u32, y: u32, w: u32, h: u32) -> Detection {
        Detection {
            bbox: BBox::new(x, y, w, h),
            confidence: 0.9,
            class_id: 0,
        }
    }

    #[test]
    fn threshold_drops_low_confidence() {
        let text = r#"[{"image_id": "a", "width": 8, "height": 8, "detections": [
            {"bbox": [0, 0, 2, 2], "confidence": 0.9, "class_id": 0},
            {"bbox": [1, 1, 2, 2], "confidence": 0.1, "class_id": 0}]}]"#;
        let sets = parse_detections(text, "mem", DEFAULT_C_MIN).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].len(), 1);
        assert_eq!(sets[0].detections[0].confidence, 0.9);
    }

    #[test]
    fn empty_detection_list() {
        let text = r#"[{"image_id": "a", "width": 8, "height": 8, "detections": []}]"#;
        let sets = parse_detections(text, "mem", DEFAULT_C_MIN).unwrap();
        assert_eq!(sets[0].len(), 0);
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "[\n{\"image_id\": \"a\",\n \"width\": 8,, }]";
        match parse_detections(text, "bad.json", DEFAULT_C_MIN) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, "bad.json");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn box_outside_image_names_image() {
        let text = r#"[{"image_id": "orchard_7", "width": 8, "height": 8, "detections": [
            {"bbox": [9, 9, 2, 2], "confidence": 0.9, "class_id": 0}]}]"#;
        let err = parse_detections(text, "mem", DEFAULT_C_MIN).unwrap_err();
        assert!(matches!(err, Error::Validation { ref image_id, .. } if image_id == "orchard_7"));
        assert!(err.to_string().contains("orchard_7"));
    }

    #[test]
    fn partially_outside_box_is_clamped() {
        let text = r#"[{"image_id": "a", "width": 8, "height": 8, "detections": [
            {"bbox": [-2, 6, 4, 5], "confidence": 0.5, "class_id": 0}]}]"#;
        let sets = parse_detections(text, "mem", DEFAULT_C_MIN).unwrap();
        assert_eq!(sets[0].detections[0].bbox, BBox::new(0, 6, 2, 2));
    }

    #[test]
    fn json_round_trip_keeps_boxes() {
        let text = r#"[{"image_id": "a", "width": 8, "height": 6, "detections": [
            {"bbox": [1, 2, 3, 4], "confidence": 1.0, "class_id": 0},
            {"bbox": [0, 0, 8, 6], "confidence": 0.4, "class_id": 2}]}]"#;
        let sets = parse_detections(text, "mem", DEFAULT_C_MIN).unwrap();
        let again = parse_detections(&detections_to_json(&sets).unwrap(), "mem", DEFAULT_C_MIN).unwrap();
        assert_eq!(sets, again);
    }

    #[test]
    fn identity_crop() {
        let img = numbered_image(4, 4);
        let crop = extract_crop(&img, &det(0, 0, 4, 4)).unwrap();
        assert_eq!(crop.pixels(), img.as_raw().as_slice());
    }

    #[test]
    fn central_crop_matches_direct_indexing() {
        let img = numbered_image(4, 4);
        let crop = extract_crop(&img, &det(1, 1, 2, 2)).unwrap();
        let mut expected = Vec::new();
        for y in 1..3 {
            for x in 1..3 {
                expected.extend_from_slice(&img.get_pixel(x, y).0);
            }
        }
        assert_eq!(crop.pixels(), expected.as_slice());
        assert_eq!((crop.width(), crop.height()), (2, 2));
    }

    #[test]
    fn corner_crop() {
        let img = numbered_image(4, 4);
        let crop = extract_crop(&img, &det(3, 3, 1, 1)).unwrap();
        assert_eq!(crop.pixels(), &img.get_pixel(3, 3).0);
    }

    #[test]
    fn crop_outside_is_degenerate() {
        let img = numbered_image(4, 4);
        assert!(matches!(
            extract_crop(&img, &det(4, 0, 2, 2)),
            Err(Error::DegenerateCrop { .. })
        ));
    }

    #[test]
    fn weights_follow_power_law() {
        assert_eq!(importance_weights(&[0.9, 0.3], 1.0), vec![0.9, 0.3]);
        assert_eq!(importance_weights(&[0.9, 0.3], 0.0), vec![1.0, 1.0]);
        assert!((importance_weights(&[0.81], 0.5)[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn full_frame_crop_has_near_zero_reduction() {
        let img = numbered_image(32, 24);
        let crop = extract_crop(&img, &det(0, 0, 32, 24)).unwrap();
        let report = byte_accounting(&[("a", &img)], &[vec![crop]]).unwrap();
        assert_eq!(report.original_bytes, report.semantic_bytes);
        assert_eq!(report.reduction_ratio, 0.0);
    }

    #[test]
    fn no_detections_means_no_semantic_bytes() {
        let img = numbered_image(16, 16);
        let report = byte_accounting(&[("a", &img)], &[vec![]]).unwrap();
        assert_eq!(report.semantic_bytes, 0);
        assert_eq!(report.semantic_raw_bytes, 0);
        assert_eq!(report.reduction_ratio, 1.0);
    }
}
