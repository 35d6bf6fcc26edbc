//! SSIM and the MIST transmission quality score.
//!
//! MIST for one image is `A · Σ_i W_i · Q_i` where `A` is the detector
//! accuracy, `W_i = c_i^σ` the importance weight of object `i` and `Q_i` the
//! SSIM between the crop before and after transmission. The score is not
//! normalized and grows with the number of objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelEnv, FadingMode, FadingSampler};
use crate::detection::{importance_weights, Crop};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    /// SSIM on BT.601 luma.
    #[default]
    Luma,
    /// Mean of the per-channel R, G, B SSIMs.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub channels: ChannelMode,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            channels: ChannelMode::Luma,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "SSIM window {} must be odd and >= 3",
                self.window_size
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.window_sigma > 0.0) {
            return Err(Error::Config("SSIM k1, k2 and sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Separable window weights: `(horizontal, vertical)`, each summing to one.
fn window(params: &SsimParams, width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let ws = params.window_size;
    if width >= ws && height >= ws {
        let half = (ws / 2) as f64;
        let mut g: Vec<f64> = (0..ws)
            .map(|k| {
                let d = k as f64 - half;
                (-d * d / (2.0 * params.window_sigma * params.window_sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        (g.clone(), g)
    } else {
        // Small crops: uniform window clipped to the crop.
        let ww = width.min(ws);
        let wh = height.min(ws);
        (vec![1.0 / ww as f64; ww], vec![1.0 / wh as f64; wh])
    }
}

/// Valid-mode separable filtering of a `width` x `height` plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let ow = width - kx.len() + 1;
    let oh = height - ky.len() + 1;
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        let out = &mut horiz[y * ow..(y + 1) * ow];
        for (x, o) in out.iter_mut().enumerate() {
            *o = kx.iter().zip(&row[x..]).map(|(k, v)| k * v).sum();
        }
    }
    let mut res = vec![0.0; ow * oh];
    for (ky_idx, k) in ky.iter().enumerate() {
        for y in 0..oh {
            let src = &horiz[(y + ky_idx) * ow..(y + ky_idx + 1) * ow];
            let dst = &mut res[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    res
}

fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize, params: &SsimParams) -> f64 {
    let (kx, ky) = window(params, width, height);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);

    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();

    let mu_a = filter_valid(a, width, height, &kx, &ky);
    let mu_b = filter_valid(b, width, height, &kx, &ky);
    let e_aa = filter_valid(&aa, width, height, &kx, &ky);
    let e_bb = filter_valid(&bb, width, height, &kx, &ky);
    let e_ab = filter_valid(&ab, width, height, &kx, &ky);

    let n = mu_a.len();
    let mut total = 0.0;
    for k in 0..n {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let var_a = e_aa[k] - ma * ma;
        let var_b = e_bb[k] - mb * mb;
        let cov = e_ab[k] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / n as f64
}

/// BT.601 luma of an RGB8 buffer.
pub fn luma(rgb: &[u8]) -> Vec<f64> {
    rgb.chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn channel_plane(rgb: &[u8], c: usize) -> Vec<f64> {
    rgb.chunks_exact(3).map(|p| p[c] as f64).collect()
}

/// Mean SSIM between two equally sized crops.
pub fn ssim(a: &Crop, b: &Crop, params: &SsimParams) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Dimension(format!(
            "ssim of {}x{} against {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    Ok(match params.channels {
        ChannelMode::Luma => ssim_plane(&luma(a.pixels()), &luma(b.pixels()), w, h, params),
        ChannelMode::PerChannel => {
            (0..3)
                .map(|c| {
                    ssim_plane(
                        &channel_plane(a.pixels(), c),
                        &channel_plane(b.pixels(), c),
                        w,
                        h,
                        params,
                    )
                })
                .sum::<f64>()
                / 3.0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MistConfig {
    /// Detector accuracy `A` (AP@0.5).
    pub accuracy: f64,
    /// Importance exponent `σ` in `W_i = c_i^σ`.
    pub sigma: f64,
}

impl Default for MistConfig {
    fn default() -> Self {
        Self {
            accuracy: 0.898,
            sigma: 1.0,
        }
    }
}

/// `A · Σ W_i·Q_i`.
pub fn mist(config: &MistConfig, weights: &[f64], qualities: &[f64]) -> Result<f64> {
    if weights.len() != qualities.len() {
        return Err(Error::Dimension(format!(
            "{} weights but {} qualities",
            weights.len(),
            qualities.len()
        )));
    }
    Ok(config.accuracy * weights.iter().zip(qualities).map(|(w, q)| w * q).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectQuality {
    pub index: usize,
    pub confidence: f64,
    pub weight: f64,
    pub power: f64,
    pub ber: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionReport {
    pub accuracy: f64,
    pub per_object: Vec<ObjectQuality>,
    pub mist: f64,
}

/// One CSV line: an `object` row per crop, then a `summary` row whose
/// numeric columns hold totals or means and whose `mist` column is set.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    row: String,
    index: usize,
    confidence: f64,
    weight: f64,
    power_w: f64,
    ber: f64,
    ssim: f64,
    mist: Option<f64>,
}

impl TransmissionReport {
    pub fn new(accuracy: f64, per_object: Vec<ObjectQuality>) -> Self {
        let mist = accuracy * per_object.iter().map(|o| o.weight * o.ssim).sum::<f64>();
        Self {
            accuracy,
            per_object,
            mist,
        }
    }

    pub fn recompute_mist(&self) -> f64 {
        self.accuracy * self.per_object.iter().map(|o| o.weight * o.ssim).sum::<f64>()
    }

    pub fn total_power(&self) -> f64 {
        self.per_object.iter().map(|o| o.power).sum()
    }

    /// Rows ordered by ascending confidence; ties keep object order.
    pub fn sorted_by_confidence(&self) -> TransmissionReport {
        let mut rows = self.per_object.clone();
        rows.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
        TransmissionReport {
            per_object: rows,
            ..self.clone()
        }
    }

    /// One row per object plus a `summary` row carrying the totals and MIST.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        for o in &self.per_object {
            w.serialize(CsvRow {
                row: "object".into(),
                index: o.index,
                confidence: o.confidence,
                weight: o.weight,
                power_w: o.power,
                ber: o.ber,
                ssim: o.ssim,
                mist: None,
            })
            .map_err(csv_err)?;
        }
        let n = self.per_object.len().max(1) as f64;
        w.serialize(CsvRow {
            row: "summary".into(),
            index: self.per_object.len(),
            confidence: self.accuracy,
            weight: self.per_object.iter().map(|o| o.weight).sum(),
            power_w: self.total_power(),
            ber: self.per_object.iter().map(|o| o.ber).sum::<f64>() / n,
            ssim: self.per_object.iter().map(|o| o.ssim).sum::<f64>() / n,
            mist: Some(self.mist),
        })
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<TransmissionReport> {
        let mut per_object = Vec::new();
        let mut summary = None;
        for record in csv::Reader::from_reader(text.as_bytes()).deserialize() {
            let r: CsvRow = record.map_err(|e| Error::Csv(e.to_string()))?;
            match r.row.as_str() {
                "object" => per_object.push(ObjectQuality {
                    index: r.index,
                    confidence: r.confidence,
                    weight: r.weight,
                    power: r.power_w,
                    ber: r.ber,
                    ssim: r.ssim,
                }),
                "summary" => {
                    let mist = r.mist.ok_or_else(|| Error::Csv("summary row without mist".into()))?;
                    summary = Some((r.confidence, mist));
                }
                other => return Err(Error::Csv(format!("unknown row kind {other:?}"))),
            }
        }
        let (accuracy, mist) = summary.ok_or_else(|| Error::Csv("missing summary row".into()))?;
        Ok(TransmissionReport {
            accuracy,
            per_object,
            mist,
        })
    }
}

/// Per-object BER before bits are flipped.
fn link_ber<R: Rng + ?Sized>(
    power: f64,
    env: &ChannelEnv,
    sampler: &FadingSampler,
    fading_rng: &mut R,
) -> Result<f64> {
    let omega = channel::mean_snr(power, env);
    let ber = match env.fading_mode {
        FadingMode::Block => channel::ber_bpsk(sampler.sample(omega, fading_rng).gamma),
        FadingMode::Ergodic => channel::average_ber(omega, env)?,
    };
    Ok(ber)
}

/// Send every crop of a scene once and score the result.
///
/// Fading draws come from `fading_rng` and bit flips from `bit_rng`. Each
/// crop takes one fading draw and one bit-noise seed in a fixed order, so two
/// allocations evaluated with equally seeded generators see the same fading
/// and nested bit errors.
#[allow(clippy::too_many_arguments)]
pub fn simulate_transmission<R: Rng + ?Sized, S: Rng + ?Sized>(
    crops: &[Crop],
    confidences: &[f64],
    powers: &[f64],
    env: &ChannelEnv,
    mist_config: &MistConfig,
    ssim_params: &SsimParams,
    fading_rng: &mut R,
    bit_rng: &mut S,
) -> Result<TransmissionReport> {
    simulate_with_received(crops, confidences, powers, env, mist_config, ssim_params, fading_rng, bit_rng)
        .map(|(report, _)| report)
}

/// [`simulate_transmission`] that also returns the received crops.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_received<R: Rng + ?Sized, S: Rng + ?Sized>(
    crops: &[Crop],
    confidences: &[f64],
    powers: &[f64],
    env: &ChannelEnv,
    mist_config: &MistConfig,
    ssim_params: &SsimParams,
    fading_rng: &mut R,
    bit_rng: &mut S,
) -> Result<(TransmissionReport, Vec<Crop>)> {
    if crops.len() != confidences.len() || crops.len() != powers.len() {
        return Err(Error::Dimension(format!(
            "{} crops, {} confidences, {} powers",
            crops.len(),
            confidences.len(),
            powers.len()
        )));
    }
    let sampler = FadingSampler::new(env.m_f, env.m_s)?;
    let weights = importance_weights(confidences, mist_config.sigma);
    let links = powers
        .iter()
        .map(|&p| link_ber(p, env, &sampler, fading_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(crops.len());
    let mut received_all = Vec::with_capacity(crops.len());
    for (i, crop) in crops.iter().enumerate() {
        let ber = links[i];
        let mut received = crop.clone();
        let mut stream = ChaCha8Rng::seed_from_u64(bit_rng.next_u64());
        channel::flip_bits_coupled(received.pixels_mut(), ber, &mut stream);
        rows.push(ObjectQuality {
            index: i,
            confidence: confidences[i],
            weight: weights[i],
            power: powers[i],
            ber,
            ssim: ssim(crop, &received, ssim_params)?,
        });
        received_all.push(received);
    }
    Ok((TransmissionReport::new(mist_config.accuracy, rows), received_all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_crop(w: u32, h: u32) -> Crop {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[(x * 13) as u8, (y * 11) as u8, ((x + y) * 7) as u8]);
            }
        }
        Crop::new(w, h, px, BBox::new(0, 0, w, h)).unwrap()
    }

    #[test]
    fn identical_crops_score_one() {
        let c = gradient_crop(20, 17);
        assert!((ssim(&c, &c, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let small = gradient_crop(5, 3);
        assert!((ssim(&small, &small, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_score_one() {
        let c = Crop::new(16, 16, vec![77; 16 * 16 * 3], BBox::new(0, 0, 16, 16)).unwrap();
        assert!((ssim(&c, &c.clone(), &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = gradient_crop(14, 12);
        let mut b = a.clone();
        b.pixels_mut()[40] ^= 0xff;
        b.pixels_mut()[100] ^= 0x0f;
        let p = SsimParams::default();
        assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-15);
        let pc = SsimParams { channels: ChannelMode::PerChannel, ..p };
        assert!(ssim(&a, &b, &pc).unwrap() < 1.0);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let a = gradient_crop(4, 4);
        let b = gradient_crop(4, 5);
        assert!(matches!(
            ssim(&a, &b, &SsimParams::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn even_window_rejected() {
        let p = SsimParams { window_size: 10, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn mist_examples() {
        let unit = MistConfig { accuracy: 1.0, sigma: 1.0 };
        assert_eq!(mist(&unit, &[1.0], &[1.0]).unwrap(), 1.0);
        let cfg = MistConfig::default();
        assert!((mist(&cfg, &[0.8, 0.6], &[1.0, 1.0]).unwrap() - 1.2572).abs() < 1e-12);
        assert_eq!(mist(&cfg, &[0.3, 0.9, 0.5], &[0.0; 3]).unwrap(), 0.0);
        assert!(mist(&cfg, &[0.3], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let report = TransmissionReport::new(
            0.898,
            vec![
                ObjectQuality { index: 0, confidence: 0.9, weight: 0.9, power: 1500.0, ber: 1.25e-5, ssim: 0.99 },
                ObjectQuality { index: 1, confidence: 0.3, weight: 0.3, power: 1500.0, ber: 0.1, ssim: 0.123456789 },
            ],
        );
        let parsed = TransmissionReport::from_csv(&report.to_csv().unwrap()).unwrap();
        assert_eq!(parsed, report);
        assert!((parsed.recompute_mist() - parsed.mist).abs() < 1e-12);
    }

    #[test]
    fn empty_report_has_summary_only() {
        let report = TransmissionReport::new(0.898, vec![]);
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(report.mist, 0.0);
        assert_eq!(TransmissionReport::from_csv(&csv).unwrap(), report);
    }

    #[test]
    fn lossless_link_gives_full_score() {
        let crops = vec![gradient_crop(12, 12), gradient_crop(6, 9)];
        let env = ChannelEnv::default();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let r = simulate_transmission(
            &crops,
            &[0.8, 0.6],
            &[1e12, 1e12],
            &env,
            &MistConfig::default(),
            &SsimParams::default(),
            &mut a,
            &mut b,
        )
        .unwrap();
        assert!((r.mist - 1.2572).abs() < 1e-12);
    }
}
