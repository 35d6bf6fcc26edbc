//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use semcom::detection::{BBox, Crop};

pub fn random_crop(w: u32, h: u32, rng: &mut ChaCha8Rng) -> Crop {
    let px = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    Crop::new(w, h, px, BBox::new(0, 0, w, h)).unwrap()
}

/// Smooth texture so that SSIM responds gradually to bit errors.
pub fn textured_crop(w: u32, h: u32, phase: f64) -> Crop {
    let mut px = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = 128.0 + 60.0 * ((x as f64 * 0.4 + phase).sin() + (y as f64 * 0.3).cos());
            px.extend_from_slice(&[v as u8, (v * 0.7) as u8, (255.0 - v) as u8]);
        }
    }
    Crop::new(w, h, px, BBox::new(0, 0, w, h)).unwrap()
}

/// SSIM with an explicit 2-D Gaussian window at every valid position.
pub fn naive_ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let (ws, sigma) = (11usize, 1.5f64);
    let half = (ws / 2) as f64;
    let mut win = vec![0.0; ws * ws];
    for i in 0..ws {
        for j in 0..ws {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            win[i * ws + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=height - ws {
        for x in 0..=width - ws {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..ws {
                for j in 0..ws {
                    let k = (y + i) * width + x + j;
                    ma += win[i * ws + j] * a[k];
                    mb += win[i * ws + j] * b[k];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..ws {
                for j in 0..ws {
                    let k = (y + i) * width + x + j;
                    let w = win[i * ws + j];
                    va += w * (a[k] - ma).powi(2);
                    vb += w * (b[k] - mb).powi(2);
                    cov += w * (a[k] - ma) * (b[k] - mb);
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}
