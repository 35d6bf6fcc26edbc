//! Deterministic MIST estimate used as the training reward.
//!
//! For every crop, SSIM is tabulated against BER on a logarithmic grid once,
//! by bit-level simulation. A power vector is then scored by mapping each
//! power to its fading-averaged BER and reading the SSIM off the table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelEnv};
use crate::detection::{importance_weights, Crop};
use crate::error::{Error, Result};
use crate::quality::{mist, ssim, MistConfig, SsimParams};

/// Smallest tabulated BER. Below it SSIM is interpolated linearly towards
/// `(0, 1)`.
pub const MIN_TABULATED_BER: f64 = 1e-9;
/// BER of a link with no power at all.
pub const MAX_BER: f64 = 0.5;

/// SSIM as a function of BER for one crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimCurve {
    /// `log10` of the tabulated BERs, strictly increasing, ending at `log10(0.5)`.
    pub log_ber: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl SsimCurve {
    /// Log-spaced BER grid from [`MIN_TABULATED_BER`] to [`MAX_BER`].
    pub fn grid(points_per_decade: usize) -> Vec<f64> {
        let lo = MIN_TABULATED_BER.log10();
        let hi = MAX_BER.log10();
        let n = ((hi - lo) * points_per_decade as f64).ceil() as usize;
        (0..=n)
            .map(|k| lo + (hi - lo) * k as f64 / n as f64)
            .collect()
    }

    /// Tabulate by flipping bits `trials` times at every grid BER.
    pub fn measure<R: Rng + ?Sized>(
        crop: &Crop,
        params: &SsimParams,
        points_per_decade: usize,
        trials: usize,
        rng: &mut R,
    ) -> Result<SsimCurve> {
        if trials == 0 {
            return Err(Error::Config("SSIM curve needs at least one trial".into()));
        }
        let log_ber = Self::grid(points_per_decade);
        let mut values = Vec::with_capacity(log_ber.len());
        for &l in &log_ber {
            let ber = 10f64.powf(l);
            let mut total = 0.0;
            for _ in 0..trials {
                let mut received = crop.clone();
                let mut stream = ChaCha8Rng::seed_from_u64(rng.next_u64());
                channel::flip_bits_coupled(received.pixels_mut(), ber, &mut stream);
                total += ssim(crop, &received, params)?;
            }
            values.push(total / trials as f64);
        }
        Ok(SsimCurve {
            log_ber,
            ssim: values,
        })
    }

    /// SSIM at `ber`, clamped to the table beyond `0.5`.
    pub fn at(&self, ber: f64) -> f64 {
        let first = self.log_ber[0];
        if ber <= 0.0 {
            return 1.0;
        }
        let l = ber.log10();
        if l <= first {
            let b0 = 10f64.powf(first);
            let t = ber / b0;
            return 1.0 + (self.ssim[0] - 1.0) * t;
        }
        let last = self.log_ber.len() - 1;
        if l >= self.log_ber[last] {
            return self.ssim[last];
        }
        let k = self.log_ber.partition_point(|&x| x <= l);
        let (l0, l1) = (self.log_ber[k - 1], self.log_ber[k]);
        let t = (l - l0) / (l1 - l0);
        self.ssim[k - 1] * (1.0 - t) + self.ssim[k] * t
    }
}

/// Scene-specific MIST estimate from per-crop SSIM curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSurrogate {
    pub env: ChannelEnv,
    pub mist: MistConfig,
    pub confidences: Vec<f64>,
    pub weights: Vec<f64>,
    pub curves: Vec<SsimCurve>,
}

/// How finely and how often SSIM curves are measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveSettings {
    pub points_per_decade: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for CurveSettings {
    fn default() -> Self {
        Self {
            points_per_decade: 4,
            trials: 24,
            seed: 17,
        }
    }
}

impl RewardSurrogate {
    pub fn build(
        crops: &[Crop],
        confidences: &[f64],
        env: ChannelEnv,
        mist_config: MistConfig,
        ssim_params: &SsimParams,
        settings: CurveSettings,
    ) -> Result<RewardSurrogate> {
        if crops.len() != confidences.len() {
            return Err(Error::Dimension(format!(
                "{} crops but {} confidences",
                crops.len(),
                confidences.len()
            )));
        }
        env.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let curves = crops
            .iter()
            .map(|c| {
                SsimCurve::measure(c, ssim_params, settings.points_per_decade, settings.trials, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RewardSurrogate {
            env,
            mist: mist_config,
            confidences: confidences.to_vec(),
            weights: importance_weights(confidences, mist_config.sigma),
            curves,
        })
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Same curves, different link.
    pub fn with_env(&self, env: ChannelEnv) -> RewardSurrogate {
        RewardSurrogate {
            env,
            ..self.clone()
        }
    }

    /// Fading-averaged BER of every object.
    pub fn bers(&self, powers: &[f64]) -> Result<Vec<f64>> {
        powers
            .iter()
            .map(|&p| channel::average_ber(channel::mean_snr(p, &self.env), &self.env))
            .collect()
    }

    /// Predicted SSIM of every object.
    pub fn qualities(&self, powers: &[f64]) -> Result<Vec<f64>> {
        if powers.len() != self.curves.len() {
            return Err(Error::Dimension(format!(
                "{} powers for {} objects",
                powers.len(),
                self.curves.len()
            )));
        }
        Ok(self
            .bers(powers)?
            .into_iter()
            .zip(&self.curves)
            .map(|(b, c)| c.at(b))
            .collect())
    }

    /// Predicted MIST of a power vector.
    pub fn score(&self, powers: &[f64]) -> Result<f64> {
        mist(&self.mist, &self.weights, &self.qualities(powers)?)
    }
}
