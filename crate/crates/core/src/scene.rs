//! Scenes ready for transmission, and a synthetic orchard generator.
//!
//! The generator draws textured apples on a foliage background and reports
//! one detection per apple. Confidence grows with apple size and falls with
//! leaf occlusion, which mimics the size/occlusion behaviour of a real
//! detector closely enough for allocation experiments.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::{extract_crops, BBox, Crop, Detection, DetectionSet};
use crate::error::Result;

/// The transmitted unit for one image: crops and their detector confidences.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image_id: String,
    pub confidences: Vec<f64>,
    pub crops: Vec<Crop>,
}

impl Scene {
    pub fn from_image(image: &RgbImage, set: &DetectionSet) -> Result<Scene> {
        Ok(Scene {
            image_id: set.image_id.clone(),
            confidences: set.confidences(),
            crops: extract_crops(image, set)?,
        })
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OrchardSpec {
    pub width: u32,
    pub height: u32,
    pub apples: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Amplitude of the skin texture on apples, in grey levels.
    pub grain: f64,
    pub seed: u64,
}

impl Default for OrchardSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            apples: 30,
            min_radius: 8.0,
            max_radius: 24.0,
            grain: 40.0,
            seed: 2024,
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Smooth value noise in [0, 1] from a lattice of random values.
struct ValueNoise {
    cell: f64,
    cols: usize,
    rows: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(width: u32, height: u32, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        Self {
            cell,
            cols,
            rows,
            lattice: (0..cols * rows).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let fx = x / self.cell;
        let fy = y / self.cell;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - fx.floor(), fy - fy.floor());
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(tx), s(ty));
        let v = |i: usize, j: usize| self.lattice[(j % self.rows) * self.cols + i % self.cols];
        let top = v(ix, iy) * (1.0 - sx) + v(ix + 1, iy) * sx;
        let bottom = v(ix, iy + 1) * (1.0 - sx) + v(ix + 1, iy + 1) * sx;
        top * (1.0 - sy) + bottom * sy
    }
}

/// Render a synthetic orchard image with one detection per apple.
///
/// Detections are listed in drawing order. The output is a pure function of
/// `spec`.
pub fn render_orchard(spec: &OrchardSpec, image_id: &str) -> (RgbImage, DetectionSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coarse = ValueNoise::new(spec.width, spec.height, 40.0, &mut rng);
    let fine = ValueNoise::new(spec.width, spec.height, 6.0, &mut rng);

    let mut img = RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let c = coarse.at(fx, fy);
        let f = fine.at(fx, fy);
        let g = 60.0 + 110.0 * c + 40.0 * (f - 0.5);
        Rgb([clamp_u8(0.35 * g + 15.0 * f), clamp_u8(g), clamp_u8(0.25 * g + 10.0)])
    });

    let mut detections = Vec::with_capacity(spec.apples);
    for _ in 0..spec.apples {
        let r = spec.min_radius + (spec.max_radius - spec.min_radius) * rng.random::<f64>().powf(1.3);
        let cx = r + rng.random::<f64>() * (spec.width as f64 - 2.0 * r);
        let cy = r + rng.random::<f64>() * (spec.height as f64 - 2.0 * r);
        let hue = rng.random::<f64>();
        let base = [
            170.0 + 70.0 * hue,
            30.0 + 90.0 * (1.0 - hue) * rng.random::<f64>(),
            25.0 + 20.0 * rng.random::<f64>(),
        ];

        for y in (cy - r).floor().max(0.0) as u32..((cy + r).ceil() as u32).min(spec.height) {
            for x in (cx - r).floor().max(0.0) as u32..((cx + r).ceil() as u32).min(spec.width) {
                let dx = (x as f64 + 0.5 - cx) / r;
                let dy = (y as f64 + 0.5 - cy) / r;
                let d2 = dx * dx + dy * dy;
                if d2 > 1.0 {
                    continue;
                }
                // Lambert-like shading with a highlight towards the upper left.
                let nz = (1.0 - d2).sqrt();
                let light = 0.45 + 0.55 * (0.5 * nz - 0.35 * dx - 0.45 * dy).max(0.0);
                let spec_hl = ((dx + 0.35).powi(2) + (dy + 0.4).powi(2)).sqrt();
                let shine = (1.0 - spec_hl / 0.25).max(0.0) * 90.0;
                let grain = spec.grain * (fine.at(x as f64 * 1.7, y as f64 * 1.7) - 0.5);
                let px = Rgb([
                    clamp_u8(base[0] * light + shine + grain),
                    clamp_u8(base[1] * light + shine + 0.6 * grain),
                    clamp_u8(base[2] * light + shine + 0.4 * grain),
                ]);
                img.put_pixel(x, y, px);
            }
        }

        // Leaf occlusion: a few green blobs over part of the apple.
        let leaves = rng.random_range(0..3usize);
        let mut covered = 0.0;
        for _ in 0..leaves {
            let lr = r * (0.35 + 0.4 * rng.random::<f64>());
            let ang = rng.random::<f64>() * std::f64::consts::TAU;
            let lx = cx + 0.7 * r * ang.cos();
            let ly = cy + 0.7 * r * ang.sin();
            covered += (lr / r).powi(2) * 0.5;
            for y in (ly - lr).floor().max(0.0) as u32..((ly + lr).ceil() as u32).min(spec.height) {
                for x in (lx - lr).floor().max(0.0) as u32..((lx + lr).ceil() as u32).min(spec.width) {
                    let dx = x as f64 + 0.5 - lx;
                    let dy = y as f64 + 0.5 - ly;
                    if dx * dx + dy * dy <= lr * lr {
                        let f = fine.at(x as f64 * 2.3, y as f64 * 2.3);
                        img.put_pixel(x, y, Rgb([clamp_u8(40.0 + 30.0 * f), clamp_u8(120.0 + 60.0 * f), clamp_u8(35.0 + 20.0 * f)]));
                    }
                }
            }
        }

        let size = (r - spec.min_radius) / (spec.max_radius - spec.min_radius).max(1e-9);
        let visible = (1.0 - covered).clamp(0.0, 1.0);
        let noise = 0.1 * (rng.random::<f64>() - 0.5);
        let confidence = (0.6 * visible + 0.5 * size + noise).clamp(0.26, 0.99);
        let confidence = (confidence * 1000.0).round() / 1000.0;

        let bbox = BBox::clamp(
            (cx - r).floor() as i64,
            (cy - r).floor() as i64,
            (2.0 * r).ceil() as i64 + 1,
            (2.0 * r).ceil() as i64 + 1,
            spec.width,
            spec.height,
        )
        .expect("apple centre lies inside the image");
        detections.push(Detection {
            bbox,
            confidence,
            class_id: 0,
        });
    }

    (
        img,
        DetectionSet {
            image_id: image_id.to_string(),
            image_width: spec.width,
            image_height: spec.height,
            detections,
        },
    )
}
