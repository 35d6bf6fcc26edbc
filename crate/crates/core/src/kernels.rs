//! Reference SimAM attention and recursive gated convolution (gⁿConv) on
//! single `(C, H, W)` feature maps, with a hand-written backward pass for
//! gⁿConv.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIMAM_LAMBDA: f64 = 1e-4;
/// Side of the depthwise kernels `f_k`.
pub const DEPTHWISE_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<FeatureMap> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("empty feature map {c}×{h}×{w}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("feature map has non-finite entries".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<FeatureMap> {
        let values = Array3::from_shape_vec((c, h, w), data)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(values)
    }

    pub fn random<R: Rng + ?Sized>(c: usize, h: usize, w: usize, rng: &mut R) -> Result<FeatureMap> {
        let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        Self::new(Array3::from_shape_simple_fn((c, h, w), || u.sample(rng)))
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Which energy denominator SimAM uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimamVariant {
    /// `(t−μ̂)² + 2σ̂² + 2λ`.
    #[default]
    Standard,
    /// `(t−μ̂)² + 2μ̂² + 2λ`, the alternative published form.
    Printed,
}

pub fn simam(x: &FeatureMap, lambda: f64) -> Result<FeatureMap> {
    simam_with(x, lambda, SimamVariant::Standard)
}

/// Parameter-free attention: each neuron is gated by `sigmoid(1/e*)` with
/// per-channel mean and variance (divisor `HW−1`).
pub fn simam_with(x: &FeatureMap, lambda: f64, variant: SimamVariant) -> Result<FeatureMap> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("SimAM lambda {lambda} must be positive")));
    }
    let (_, h, w) = x.shape();
    let n = (h * w) as f64;
    let mut out = x.values.clone();
    for mut ch in out.outer_iter_mut() {
        let mu = ch.sum() / n;
        let var = ch.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let extra = match variant {
            SimamVariant::Standard => 2.0 * var,
            SimamVariant::Printed => 2.0 * mu * mu,
        };
        ch.mapv_inplace(|t| {
            let inv_energy = ((t - mu).powi(2) + extra + 2.0 * lambda) / (4.0 * (var + lambda));
            t * sigmoid(inv_energy)
        });
    }
    Ok(FeatureMap { values: out })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `C_k = C/2^(n−k−1)` for `k = 0..n`.
pub fn order_channels(order: usize, channels: usize) -> Result<Vec<usize>> {
    if order == 0 || channels == 0 {
        return Err(Error::Config("gnConv needs order ≥ 1 and C ≥ 1".into()));
    }
    let div = 1usize
        .checked_shl(order as u32 - 1)
        .filter(|d| *d <= channels && channels.is_multiple_of(*d))
        .ok_or_else(|| {
            Error::Config(format!(
                "C = {channels} is not divisible by 2^{} for order {order}",
                order - 1
            ))
        })?;
    Ok((0..order).map(|k| channels / div * (1 << k)).collect())
}

/// Weights of one gⁿConv block. All convolutions are bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct GnConvParams {
    pub order: usize,
    pub channels: usize,
    pub alpha: f64,
    /// `(2C, C)`: rows `0..C_0` give `p_0`, the rest give `q_0..q_{n−1}`.
    pub phi_in: Array2<f64>,
    /// `(C, C)`.
    pub phi_out: Array2<f64>,
    /// `f_k`, shape `(C_k, 3, 3)`.
    pub depthwise: Vec<Array3<f64>>,
    /// `g_k` for `k ≥ 1`, shape `(C_k, C_{k−1})`. `g_0` is the identity.
    pub mixing: Vec<Array2<f64>>,
}

impl GnConvParams {
    /// Uniform `±1/√fan_in` initialization from a seed.
    pub fn seeded(order: usize, channels: usize, seed: u64) -> Result<GnConvParams> {
        let dims = order_channels(order, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: (usize, usize), fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-b, b).expect("valid range");
            Array2::from_shape_simple_fn(shape, || u.sample(&mut rng))
        };
        let phi_in = init((2 * channels, channels), channels);
        let phi_out = init((channels, channels), channels);
        let mixing = (1..order).map(|k| init((dims[k], dims[k - 1]), dims[k - 1])).collect();
        let depthwise = dims
            .iter()
            .map(|&ck| {
                let taps = DEPTHWISE_SIZE * DEPTHWISE_SIZE;
                init((ck, taps), taps)
                    .into_shape_with_order((ck, DEPTHWISE_SIZE, DEPTHWISE_SIZE))
                    .expect("same length")
            })
            .collect();
        Ok(GnConvParams {
            order,
            channels,
            alpha: 1.0,
            phi_in,
            phi_out,
            depthwise,
            mixing,
        })
    }

    /// Replace every depthwise kernel by the centre tap, so `f_k(q) = q`.
    pub fn with_identity_kernels(mut self) -> Self {
        for f in &mut self.depthwise {
            f.fill(0.0);
            f.slice_mut(s![.., DEPTHWISE_SIZE / 2, DEPTHWISE_SIZE / 2]).fill(1.0);
        }
        self
    }

    pub fn order_channels(&self) -> Vec<usize> {
        self.depthwise.iter().map(|f| f.dim().0).collect()
    }

    fn validate(&self) -> Result<Vec<usize>> {
        let dims = order_channels(self.order, self.channels)?;
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        let c = self.channels;
        let ok = self.phi_in.dim() == (2 * c, c)
            && self.phi_out.dim() == (c, c)
            && self.order_channels() == dims
            && self.depthwise.iter().all(|f| f.dim().1 == DEPTHWISE_SIZE && f.dim().2 == DEPTHWISE_SIZE)
            && self.mixing.len() + 1 == self.order
            && self
                .mixing
                .iter()
                .enumerate()
                .all(|(i, g)| g.dim() == (dims[i + 1], dims[i]));
        if !ok {
            return Err(Error::Dimension("gnConv weights do not match C and n".into()));
        }
        Ok(dims)
    }

    fn zeros_like(&self) -> GnConvParams {
        GnConvParams {
            order: self.order,
            channels: self.channels,
            alpha: self.alpha,
            phi_in: Array2::zeros(self.phi_in.raw_dim()),
            phi_out: Array2::zeros(self.phi_out.raw_dim()),
            depthwise: self.depthwise.iter().map(|f| Array3::zeros(f.raw_dim())).collect(),
            mixing: self.mixing.iter().map(|g| Array2::zeros(g.raw_dim())).collect(),
        }
    }

    /// Every weight, in a fixed order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.phi_in.iter().chain(self.phi_out.iter()).copied().collect();
        self.depthwise.iter().for_each(|f| v.extend(f.iter()));
        self.mixing.iter().for_each(|g| v.extend(g.iter()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut v: Vec<&mut f64> = self.phi_in.iter_mut().chain(self.phi_out.iter_mut()).collect();
        for f in &mut self.depthwise {
            v.extend(f.iter_mut());
        }
        for g in &mut self.mixing {
            v.extend(g.iter_mut());
        }
        v
    }
}

/// Pointwise convolution: `(out, in)` weights over `(in, HW)` pixels.
fn pointwise(weights: &Array2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    weights.dot(&x)
}

/// Depthwise same-padded convolution on `(C, H, W)`.
fn depthwise(kernels: &Array3<f64>, x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let r = (DEPTHWISE_SIZE / 2) as isize;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, z) = (i as isize + di, j as isize + dj);
                        if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                            acc += kernels[[ch, (di + r) as usize, (dj + r) as usize]]
                                * x[[ch, y as usize, z as usize]];
                        }
                    }
                }
                out[[ch, i, j]] = acc;
            }
        }
    }
    out
}

/// Gradients of [`depthwise`] given upstream `dy`: `(d kernels, dx)`.
fn depthwise_backward(kernels: &Array3<f64>, x: &Array3<f64>, dy: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let (c, h, w) = x.dim();
    let r = (DEPTHWISE_SIZE / 2) as isize;
    let mut dk = Array3::zeros(kernels.raw_dim());
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let g = dy[[ch, i, j]];
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, z) = (i as isize + di, j as isize + dj);
                        if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                            let (a, b) = ((di + r) as usize, (dj + r) as usize);
                            dk[[ch, a, b]] += g * x[[ch, y as usize, z as usize]];
                            dx[[ch, y as usize, z as usize]] += g * kernels[[ch, a, b]];
                        }
                    }
                }
            }
        }
    }
    (dk, dx)
}

struct GnConvTape {
    dims: Vec<usize>,
    /// `p_0..p_n`, each `(C_k, HW)`.
    p: Vec<Array2<f64>>,
    q: Vec<Array3<f64>>,
    fq: Vec<Array2<f64>>,
    gp: Vec<Array2<f64>>,
}

fn gnconv_tape(x: &FeatureMap, params: &GnConvParams) -> Result<(Array3<f64>, GnConvTape)> {
    let dims = params.validate()?;
    let (c, h, w) = x.shape();
    if c != params.channels {
        return Err(Error::Dimension(format!(
            "{c}-channel input for a {}-channel gnConv",
            params.channels
        )));
    }
    let hw = h * w;
    let flat = x.values.view().into_shape_with_order((c, hw)).expect("contiguous");
    let projected = pointwise(&params.phi_in, flat);
    let mut p = vec![projected.slice(s![..dims[0], ..]).to_owned()];
    let mut offset = dims[0];
    let mut q = Vec::with_capacity(params.order);
    for &ck in &dims {
        let block = projected.slice(s![offset..offset + ck, ..]).to_owned();
        q.push(block.into_shape_with_order((ck, h, w)).expect("contiguous"));
        offset += ck;
    }
    let (mut fq, mut gp) = (Vec::new(), Vec::new());
    for k in 0..params.order {
        let f = depthwise(&params.depthwise[k], &q[k])
            .into_shape_with_order((dims[k], hw))
            .expect("contiguous");
        let g = if k == 0 {
            p[0].clone()
        } else {
            pointwise(&params.mixing[k - 1], p[k].view())
        };
        p.push(&f * &g / params.alpha);
        fq.push(f);
        gp.push(g);
    }
    let y = pointwise(&params.phi_out, p[params.order].view())
        .into_shape_with_order((c, h, w))
        .expect("contiguous");
    Ok((y, GnConvTape { dims, p, q, fq, gp }))
}

/// Recursive gated convolution; output shape equals input shape.
pub fn gnconv(x: &FeatureMap, params: &GnConvParams) -> Result<FeatureMap> {
    Ok(FeatureMap {
        values: gnconv_tape(x, params)?.0,
    })
}

/// The recursion's final `p_n` before `φ_out`, as `(C, H, W)`.
pub fn gnconv_gated(x: &FeatureMap, params: &GnConvParams) -> Result<Array3<f64>> {
    let (_, tape) = gnconv_tape(x, params)?;
    let (_, h, w) = x.shape();
    let last = tape.p.last().expect("order ≥ 1").clone();
    Ok(last.into_shape_with_order((params.channels, h, w)).expect("contiguous"))
}

/// Reverse mode through [`gnconv`]: `(weight gradients, input gradient)`.
pub fn gnconv_backward(
    x: &FeatureMap,
    params: &GnConvParams,
    upstream: &Array3<f64>,
) -> Result<(GnConvParams, Array3<f64>)> {
    let (y, tape) = gnconv_tape(x, params)?;
    if upstream.dim() != y.dim() {
        return Err(Error::Dimension("upstream gradient shape differs from output".into()));
    }
    let (c, h, w) = x.shape();
    let hw = h * w;
    let n = params.order;
    let dims = &tape.dims;
    let mut grads = params.zeros_like();

    let dy = upstream.view().into_shape_with_order((c, hw)).expect("contiguous");
    grads.phi_out = dy.dot(&tape.p[n].t());
    let mut dp = params.phi_out.t().dot(&dy);
    let mut dq: Vec<Array3<f64>> = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let df = &dp * &tape.gp[k] / params.alpha;
        let dg = &dp * &tape.fq[k] / params.alpha;
        let df3 = df.into_shape_with_order((dims[k], h, w)).expect("contiguous");
        let (dk, dqk) = depthwise_backward(&params.depthwise[k], &tape.q[k], &df3);
        grads.depthwise[k] = dk;
        dq.push(dqk);
        dp = if k == 0 {
            dg
        } else {
            grads.mixing[k - 1] = dg.dot(&tape.p[k].t());
            params.mixing[k - 1].t().dot(&dg)
        };
    }
    dq.reverse();

    let mut dproj = Array2::zeros((2 * c, hw));
    dproj.slice_mut(s![..dims[0], ..]).assign(&dp);
    let mut offset = dims[0];
    for (k, &ck) in dims.iter().enumerate() {
        let block = dq[k].view().into_shape_with_order((ck, hw)).expect("contiguous");
        dproj.slice_mut(s![offset..offset + ck, ..]).assign(&block);
        offset += ck;
    }
    let flat = x.values.view().into_shape_with_order((c, hw)).expect("contiguous");
    grads.phi_in = dproj.dot(&flat.t());
    let dx = params
        .phi_in
        .t()
        .dot(&dproj)
        .into_shape_with_order((c, h, w))
        .expect("contiguous");
    Ok((grads, dx))
}

fn probe_loss(x: &FeatureMap, params: &GnConvParams, r: &Array3<f64>) -> Result<f64> {
    Ok((&gnconv(x, params)?.values * r).sum())
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `Σ r ⊙ gnconv(x)` over all weights and inputs, with `r`
/// drawn from a fixed seed. Errors are relative to `max(|a|, |b|, 1e-6)`.
pub fn gnconv_grad_check(params: &GnConvParams, x: &FeatureMap) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = FeatureMap::random(x.shape().0, x.shape().1, x.shape().2, &mut rng)?.values;
    let (grads, dx) = gnconv_backward(x, params, &r)?;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut worst: f64 = 0.0;

    let analytic = grads.flat();
    let mut probe = params.clone();
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.params_mut()[i];
        *probe.params_mut()[i] = orig + H;
        let up = probe_loss(x, &probe, &r)?;
        *probe.params_mut()[i] = orig - H;
        let down = probe_loss(x, &probe, &r)?;
        *probe.params_mut()[i] = orig;
        worst = worst.max(rel(*a, (up - down) / (2.0 * H)));
    }
    let mut xp = x.clone();
    for (idx, a) in dx.indexed_iter() {
        let orig = xp.values[idx];
        xp.values[idx] = orig + H;
        let up = probe_loss(&xp, params, &r)?;
        xp.values[idx] = orig - H;
        let down = probe_loss(&xp, params, &r)?;
        xp.values[idx] = orig;
        worst = worst.max(rel(*a, (up - down) / (2.0 * H)));
    }
    Ok(worst)
}

/// Sum of `φ_in` output channels, `C_0 + Σ C_k`.
pub fn projection_channels(params: &GnConvParams) -> usize {
    params.phi_in.len_of(Axis(0))
}
