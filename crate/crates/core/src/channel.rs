//! Fisher-Snedecor F composite fading link.
//!
//! Small-scale fading is Nakagami-m (power gain `X ~ Gamma(m_f, 1/m_f)`) and
//! shadowing is inverse Nakagami-m (`1/Y` with `Y ~ Gamma(m_s, 1/m_s)`). The
//! instantaneous SNR is
//!
//! ```text
//! γ = Ω̄ · (m_s − 1)/m_s · X / Y
//! ```
//!
//! which has mean `Ω̄` for `m_s > 1` and density
//!
//! ```text
//! f(γ) = m_f^m_f ((m_s−1)Ω̄)^m_s γ^(m_f−1) / (B(m_f, m_s) (m_f γ + (m_s−1)Ω̄)^(m_f+m_s))
//! ```
//!
//! Payloads are sent as uncoded BPSK, so the conditional bit error rate is
//! `Q(√(2γ)) = erfc(√γ)/2`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::detection::Crop;
use crate::error::{Error, Result};
use crate::quad::{self, Tolerance};

/// Reference gain at 1 m, dB.
pub const DEFAULT_REF_GAIN_DB: f64 = -40.0;
/// Receiver noise power, dBm. Calibrated so that 100 W per object at 10 m
/// (3000 W shared by 30 objects) gives an ergodic BER of 1e-4 with
/// `m_f = m_s = 6` and path-loss exponent 2.7.
pub const DEFAULT_NOISE_POWER_DBM: f64 = -30.101_279_123_957_47;
pub const DEFAULT_PATHLOSS_EXP: f64 = 2.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FadingMode {
    /// One fading draw per crop.
    #[default]
    Block,
    /// Every bit sees the fading-averaged BER.
    Ergodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelEnv {
    pub m_f: f64,
    pub m_s: f64,
    /// Total transmit power budget `P`, watts.
    pub total_power: f64,
    /// UAV to user distance `D`, metres.
    pub distance: f64,
    pub pathloss_exp: f64,
    pub ref_gain_db: f64,
    pub noise_power_dbm: f64,
    pub fading_mode: FadingMode,
}

impl Default for ChannelEnv {
    fn default() -> Self {
        Self {
            m_f: 6.0,
            m_s: 6.0,
            total_power: 3000.0,
            distance: 10.0,
            pathloss_exp: DEFAULT_PATHLOSS_EXP,
            ref_gain_db: DEFAULT_REF_GAIN_DB,
            noise_power_dbm: DEFAULT_NOISE_POWER_DBM,
            fading_mode: FadingMode::Block,
        }
    }
}

impl ChannelEnv {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_f >= 0.5) {
            return Err(Error::Config(format!("m_f = {} must be >= 0.5", self.m_f)));
        }
        if !(self.m_s > 1.0) {
            return Err(Error::Config(format!(
                "m_s = {} must be > 1 for a finite mean SNR",
                self.m_s
            )));
        }
        if !(self.total_power > 0.0) {
            return Err(Error::Config(format!(
                "total power {} W must be positive",
                self.total_power
            )));
        }
        if !(self.distance > 0.0) {
            return Err(Error::Config(format!(
                "distance {} m must be positive",
                self.distance
            )));
        }
        Ok(())
    }

    pub fn with_distance(self, distance: f64) -> Self {
        Self { distance, ..self }
    }

    pub fn with_total_power(self, total_power: f64) -> Self {
        Self {
            total_power,
            ..self
        }
    }

    pub fn with_mode(self, fading_mode: FadingMode) -> Self {
        Self {
            fading_mode,
            ..self
        }
    }

    /// Linear reference gain `g0`.
    pub fn ref_gain(&self) -> f64 {
        10f64.powf(self.ref_gain_db / 10.0)
    }

    /// Noise power in watts.
    pub fn noise_power_w(&self) -> f64 {
        10f64.powf((self.noise_power_dbm - 30.0) / 10.0)
    }
}

/// One realization of the instantaneous SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingSample {
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub mean_snr: f64,
    pub ber: f64,
    pub bits_sent: u64,
    pub bits_flipped: u64,
}

/// Mean SNR `Ω̄ = p·g0·D^(−n)/N0` for transmit power `p` watts.
pub fn mean_snr(power: f64, env: &ChannelEnv) -> f64 {
    power * env.ref_gain() * env.distance.powf(-env.pathloss_exp) / env.noise_power_w()
}

/// Reusable sampler for the normalized fading ratio `(m_s−1)/m_s · X/Y`.
#[derive(Debug, Clone)]
pub struct FadingSampler {
    fading: Gamma<f64>,
    shadowing: Gamma<f64>,
    norm: f64,
}

impl FadingSampler {
    pub fn new(m_f: f64, m_s: f64) -> Result<Self> {
        if !(m_s > 1.0) {
            return Err(Error::Config(format!(
                "m_s = {m_s} gives an infinite mean SNR (needs m_s > 1)"
            )));
        }
        if !(m_f > 0.0) {
            return Err(Error::Config(format!("m_f = {m_f} must be positive")));
        }
        let gamma = |shape: f64| {
            Gamma::new(shape, 1.0 / shape).map_err(|e| Error::Config(format!("gamma({shape}): {e}")))
        };
        Ok(Self {
            fading: gamma(m_f)?,
            shadowing: gamma(m_s)?,
            norm: (m_s - 1.0) / m_s,
        })
    }

    /// Unit-mean fading gain.
    pub fn gain<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = self.fading.sample(rng);
        let y = self.shadowing.sample(rng);
        self.norm * x / y
    }

    pub fn sample<R: Rng + ?Sized>(&self, omega_bar: f64, rng: &mut R) -> FadingSample {
        FadingSample {
            gamma: omega_bar * self.gain(rng),
        }
    }
}

/// Draw one instantaneous SNR around mean `omega_bar`.
pub fn sample_fading<R: Rng + ?Sized>(
    omega_bar: f64,
    m_f: f64,
    m_s: f64,
    rng: &mut R,
) -> Result<FadingSample> {
    Ok(FadingSampler::new(m_f, m_s)?.sample(omega_bar, rng))
}

/// Density of the instantaneous SNR.
pub fn fading_pdf(gamma: f64, omega_bar: f64, m_f: f64, m_s: f64) -> f64 {
    if gamma <= 0.0 || omega_bar <= 0.0 {
        return 0.0;
    }
    let scale = (m_s - 1.0) * omega_bar;
    let ln_beta = libm::lgamma(m_f) + libm::lgamma(m_s) - libm::lgamma(m_f + m_s);
    let ln_f = m_f * m_f.ln() + m_s * scale.ln() + (m_f - 1.0) * gamma.ln()
        - ln_beta
        - (m_f + m_s) * (m_f * gamma + scale).ln();
    ln_f.exp()
}

/// Uncoded BPSK bit error rate at SNR `gamma`: `Q(√(2γ))`.
pub fn ber_bpsk(gamma: f64) -> f64 {
    0.5 * libm::erfc(gamma.max(0.0).sqrt())
}

/// Fading-averaged BPSK BER, by adaptive quadrature over the SNR density.
pub fn average_ber(omega_bar: f64, env: &ChannelEnv) -> Result<f64> {
    average_ber_with(omega_bar, env.m_f, env.m_s)
}

pub fn average_ber_with(omega_bar: f64, m_f: f64, m_s: f64) -> Result<f64> {
    if omega_bar <= 0.0 {
        return Ok(0.5);
    }
    if !(m_s > 1.0) {
        return Err(Error::Config(format!("m_s = {m_s} must be > 1")));
    }
    let tol = Tolerance {
        abs: 1e-300,
        rel: 1e-9,
        max_intervals: 4000,
    };
    let est = quad::integrate_half_line(
        |g| ber_bpsk(g) * fading_pdf(g, omega_bar, m_f, m_s),
        omega_bar.min(1.0),
        tol,
    )?;
    Ok(est.value.clamp(0.0, 0.5))
}

/// Flip each bit of `bytes` independently with probability `ber`. Returns
/// the number of flipped bits.
///
/// Gaps between flips are drawn from the geometric distribution, so the cost
/// scales with the number of flips rather than the payload length.
pub fn flip_bits<R: Rng + ?Sized>(bytes: &mut [u8], ber: f64, rng: &mut R) -> u64 {
    let total = bytes.len() as u64 * 8;
    if ber <= 0.0 || total == 0 {
        return 0;
    }
    if ber >= 1.0 {
        for b in bytes.iter_mut() {
            *b = !*b;
        }
        return total;
    }
    let ln_keep = (-ber).ln_1p();
    let mut pos: u64 = 0;
    let mut flipped = 0;
    loop {
        // u in (0, 1]
        let u = 1.0 - rng.random::<f64>();
        let gap = (u.ln() / ln_keep).floor();
        if gap >= (total - pos) as f64 {
            break;
        }
        pos += gap as u64;
        bytes[(pos / 8) as usize] ^= 0x80 >> (pos % 8);
        flipped += 1;
        pos += 1;
        if pos >= total {
            break;
        }
    }
    flipped
}

/// Flip bits like [`flip_bits`], but draw exactly one uniform per bit.
///
/// Bit `k` flips when its uniform falls below `ber`, so two calls fed
/// identically seeded generators flip nested sets of bits: every bit flipped
/// at a lower BER is also flipped at a higher one. Allocations compared under
/// such common noise differ only through their powers.
pub fn flip_bits_coupled<R: Rng + ?Sized>(bytes: &mut [u8], ber: f64, rng: &mut R) -> u64 {
    // Compare in 64-bit fixed point; BER 1 maps past u64::MAX and flips all.
    let threshold = ber.clamp(0.0, 1.0) * 18_446_744_073_709_551_616.0;
    let mut flipped = 0;
    for byte in bytes.iter_mut() {
        for bit in 0..8 {
            if (rng.next_u64() as f64) < threshold {
                *byte ^= 0x80 >> bit;
                flipped += 1;
            }
        }
    }
    flipped
}

/// Send a crop through a binary symmetric channel with a given BER.
pub fn transmit_with_ber<R: Rng + ?Sized>(
    crop: &Crop,
    ber: f64,
    mean_snr: f64,
    rng: &mut R,
) -> (Crop, LinkResult) {
    let mut out = crop.clone();
    let bits_flipped = flip_bits(out.pixels_mut(), ber, rng);
    (
        out,
        LinkResult {
            mean_snr,
            ber,
            bits_sent: crop.bit_len(),
            bits_flipped,
        },
    )
}

/// Send a crop with transmit power `power` over `env`.
pub fn transmit<R: Rng + ?Sized>(
    crop: &Crop,
    power: f64,
    env: &ChannelEnv,
    rng: &mut R,
) -> Result<(Crop, LinkResult)> {
    let omega = mean_snr(power, env);
    let ber = match env.fading_mode {
        FadingMode::Block => {
            let sample = sample_fading(omega, env.m_f, env.m_s, rng)?;
            ber_bpsk(sample.gamma)
        }
        FadingMode::Ergodic => average_ber(omega, env)?,
    };
    Ok(transmit_with_ber(crop, ber, omega, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn crop(w: u32, h: u32) -> Crop {
        let pixels = (0..3 * w * h).map(|k| (k * 37 % 251) as u8).collect();
        Crop::new(w, h, pixels, BBox::new(0, 0, w, h)).unwrap()
    }

    #[test]
    fn zero_power_zero_snr() {
        assert_eq!(mean_snr(0.0, &ChannelEnv::default()), 0.0);
    }

    #[test]
    fn snr_is_linear_in_power() {
        let env = ChannelEnv::default();
        assert_eq!(mean_snr(200.0, &env), 2.0 * mean_snr(100.0, &env));
    }

    #[test]
    fn snr_regression_at_default_calibration() {
        // 100 W · 1e-4 · 10^-2.7 / 10^((N−30)/10), hand-evaluated.
        let env = ChannelEnv::default();
        let n0 = 10f64.powf((DEFAULT_NOISE_POWER_DBM - 30.0) / 10.0);
        let expected = 100.0 * 1e-4 * 10f64.powf(-2.7) / n0;
        assert!((mean_snr(100.0, &env) - expected).abs() < 1e-12 * expected);
        assert!((mean_snr(100.0, &env) - 20.423_393_846).abs() < 1e-6);
    }

    #[test]
    fn snr_decreases_with_distance() {
        let env = ChannelEnv::default();
        assert!(mean_snr(100.0, &env.with_distance(20.0)) < mean_snr(100.0, &env));
    }

    #[test]
    fn zero_mean_gives_zero_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_fading(0.0, 6.0, 6.0, &mut rng).unwrap().gamma, 0.0);
        }
    }

    #[test]
    fn infinite_mean_shadowing_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_fading(1.0, 6.0, 1.0, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(ChannelEnv { m_s: 0.9, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn bpsk_reference_values() {
        assert_eq!(ber_bpsk(0.0), 0.5);
        assert!((ber_bpsk(1.0) - 0.078_649_603_525_142_57).abs() < 1e-15);
        assert!((ber_bpsk(10.0) - 3.872_108_215_522_037e-6).abs() < 1e-18);
    }

    #[test]
    fn average_ber_at_zero_snr() {
        assert_eq!(average_ber(0.0, &ChannelEnv::default()).unwrap(), 0.5);
    }

    #[test]
    fn average_ber_monotone() {
        let env = ChannelEnv::default();
        for omega in [0.1, 1.0, 10.0] {
            assert!(average_ber(2.0 * omega, &env).unwrap() < average_ber(omega, &env).unwrap());
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        for (m_f, m_s, omega) in [(6.0, 6.0, 1.0), (0.5, 1.5, 3.0), (2.0, 10.0, 0.2)] {
            let est = quad::integrate_half_line(
                |g| fading_pdf(g, omega, m_f, m_s),
                omega,
                Tolerance { rel: 1e-8, ..Default::default() },
            )
            .unwrap();
            assert!((est.value - 1.0).abs() < 1e-7, "{m_f} {m_s}: {}", est.value);
        }
    }

    #[test]
    fn calibration_point_is_1e_minus_4() {
        let env = ChannelEnv::default();
        let ber = average_ber(mean_snr(100.0, &env), &env).unwrap();
        assert!((ber - 1e-4).abs() < 1e-8, "{ber}");
    }

    #[test]
    fn huge_power_is_lossless() {
        let env = ChannelEnv::default().with_mode(FadingMode::Ergodic);
        let c = crop(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, link) = transmit(&c, 1e12, &env, &mut rng).unwrap();
        assert_eq!(out, c);
        assert_eq!(link.bits_flipped, 0);
    }

    #[test]
    fn ber_one_complements_every_bit() {
        let c = crop(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, link) = transmit_with_ber(&c, 1.0, 0.0, &mut rng);
        assert_eq!(link.bits_flipped, link.bits_sent);
        for (a, b) in out.pixels().iter().zip(c.pixels()) {
            assert_eq!(*a, !*b);
        }
    }

    #[test]
    fn flip_rate_within_binomial_band() {
        let c = crop(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inside = (0..1000)
            .filter(|_| {
                let (_, link) = transmit_with_ber(&c, 0.01, 0.0, &mut rng);
                assert_eq!(link.bits_sent, 2400);
                let rate = link.bits_flipped as f64 / 2400.0;
                (0.002..=0.025).contains(&rate)
            })
            .count();
        assert!(inside >= 990, "{inside}");
    }

    #[test]
    fn coupled_flips_are_nested() {
        let c = crop(12, 12);
        let flips = |ber| {
            let mut out = c.pixels().to_vec();
            flip_bits_coupled(&mut out, ber, &mut ChaCha8Rng::seed_from_u64(9));
            out
        };
        let (low, high) = (flips(0.01), flips(0.1));
        for ((o, l), h) in c.pixels().iter().zip(&low).zip(&high) {
            let (dl, dh) = (o ^ l, o ^ h);
            assert_eq!(dl & dh, dl);
        }
        assert_eq!(flips(0.0), c.pixels());
        assert!(flips(1.0).iter().zip(c.pixels()).all(|(a, b)| *a == !*b));
    }

    #[test]
    fn same_seed_same_corruption() {
        let env = ChannelEnv::default().with_distance(40.0);
        let c = crop(16, 16);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            transmit(&c, 10.0, &env, &mut rng).unwrap()
        };
        assert_eq!(run(5).0, run(5).0);
    }
}
