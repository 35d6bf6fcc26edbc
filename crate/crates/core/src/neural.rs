//! Small batched multilayer perceptrons with hand-written reverse mode,
//! Adam, soft target updates and a replay buffer.
//!
//! Inputs are row batches: an `(n, in)` matrix maps to `(n, out)`. Weights are
//! stored `(in, out)` so a layer is `x·W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden: Activation,
    output: Activation,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Gradients {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
    }

    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum();
        let b: f64 = self.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum();
        (w + b).sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Activations recorded by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input of every layer, then the final output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape holds the input")
    }
}

impl Mlp {
    /// Random network with uniform fan-in initialization `U(−1/√in, 1/√in)`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Mlp> {
        let mut net = Mlp::zeros(widths, hidden, output)?;
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let bound = 1.0 / (w.nrows() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            w.iter_mut().for_each(|v| *v = dist.sample(rng));
            b.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Mlp> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Dimension(format!(
                "layer widths {widths:?} need at least two positive entries"
            )));
        }
        Ok(Mlp {
            weights: widths.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect(),
            biases: widths[1..].iter().map(|&n| Array1::zeros(n)).collect(),
            hidden,
            output,
        })
    }

    /// Build from explicit `(in, out)` weight matrices and biases.
    pub fn from_layers(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Mlp> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Dimension("need one bias per weight matrix".into()));
        }
        for k in 0..weights.len() {
            if biases[k].len() != weights[k].ncols() {
                return Err(Error::Dimension(format!("layer {k}: bias length mismatch")));
            }
            if k > 0 && weights[k].nrows() != weights[k - 1].ncols() {
                return Err(Error::Dimension(format!("layer {k}: input width mismatch")));
            }
        }
        Ok(Mlp {
            weights,
            biases,
            hidden,
            output,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].nrows()];
        w.extend(self.weights.iter().map(|m| m.ncols()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").ncols()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.activation(k);
            let mut z = a.dot(w);
            z += b;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }

    /// Forward a single input vector.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        let mut activations = vec![x.to_owned()];
        let mut pre_activations = Vec::with_capacity(self.weights.len());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.activation(k);
            let mut z = activations[k].dot(w);
            z += b;
            let a = z.mapv(|v| act.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(Tape {
            activations,
            pre_activations,
        })
    }

    /// Reverse mode: given `∂L/∂output` for every row, return the parameter
    /// gradients summed over rows and `∂L/∂input` per row.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if upstream.dim() != tape.output().dim() {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                tape.output().dim()
            )));
        }
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        let mut delta = upstream.to_owned();
        for k in (0..layers).rev() {
            let act = self.activation(k);
            Zip::from(&mut delta)
                .and(&tape.pre_activations[k])
                .and(&tape.activations[k + 1])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            gw.push(tape.activations[k].t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.weights[k].t());
        }
        gw.reverse();
        gb.reverse();
        Ok((
            Gradients {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
            b.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.widths() == other.widths()
    }

    pub fn to_snapshot(&self) -> MlpSnapshot {
        MlpSnapshot {
            widths: self.widths(),
            hidden: self.hidden,
            output: self.output,
            params: self.params_flat(),
        }
    }

    pub fn from_snapshot(s: &MlpSnapshot) -> Result<Mlp> {
        let mut net = Mlp::zeros(&s.widths, s.hidden, s.output)?;
        net.set_params_flat(&s.params)?;
        Ok(net)
    }
}

/// Serializable network: layer widths plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub params: Vec<f64>,
}

/// `target ← τ·online + (1−τ)·target`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !target.same_shape(online) {
        return Err(Error::Dimension(format!(
            "soft update between {:?} and {:?}",
            target.widths(),
            online.widths()
        )));
    }
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &Mlp) -> Self {
        let n = net.param_count();
        Self {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected Adam step, descending along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        let g = grads.flat();
        if g.len() != self.m.len() || g.len() != net.param_count() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} moments and {} parameters",
                g.len(),
                self.m.len(),
                net.param_count()
            )));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut params = net.params_flat();
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        net.set_params_flat(&params)
    }
}

/// Fixed-capacity FIFO of training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    /// Slot the next push overwrites once the buffer is full.
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            next: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Records from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Up to `n` distinct records, uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        let n = n.min(self.items.len());
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}
