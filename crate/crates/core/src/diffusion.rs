//! Diffusion-model power allocator trained with twin critics.
//!
//! The policy is a conditional DDPM over an unnormalized action vector `w`
//! of length `U_max`. Starting from `w^N ~ N(0, I)`, each reverse step applies
//!
//! ```text
//! w^{j−1} = (w^j − β_j/√(1−ᾱ_j) · ε_θ(w^j, e, j)) / √α_j + √β_j · z
//! ```
//!
//! with `z = 0` on the last step. The result is mapped onto the power simplex
//! by softplus, masking of padded objects and normalization, then scaled by
//! the budget. Critics score `(e, fractions)`; the denoiser is trained by
//! backpropagating `−Q₁` through the whole reverse chain.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationRequest, Allocator, PowerVector};
use crate::channel::ChannelEnv;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::neural::{
    soft_update, Activation, AdamConfig, AdamState, Gradients, Mlp, MlpSnapshot, ReplayBuffer, Tape,
};
use crate::surrogate::RewardSurrogate;

/// Number of sin/cos frequency pairs in the timestep embedding.
pub const TIME_FREQUENCIES: usize = 4;
/// Scalar features ahead of the confidences in an encoded state.
const STATE_SCALARS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl BetaSchedule {
    /// Linear schedule from `beta_1` to `beta_n` over `n` steps.
    pub fn linear(n: usize, beta_1: f64, beta_n: f64) -> Result<BetaSchedule> {
        if n == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas = (0..n)
            .map(|k| {
                if n == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_n - beta_1) * k as f64 / (n - 1) as f64
                }
            })
            .collect();
        let schedule = Self::from_betas(betas)?;
        if schedule.betas.iter().any(|&b| b <= 0.0) {
            return Err(Error::Config("linear schedule needs positive betas".into()));
        }
        Ok(schedule)
    }

    /// Arbitrary schedule with `0 ≤ β_j < 1`. Zero betas are accepted so that
    /// noiseless chains can be built for testing.
    pub fn from_betas(betas: Vec<f64>) -> Result<BetaSchedule> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(BetaSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_j` for `1 ≤ j ≤ N`.
    pub fn beta(&self, j: usize) -> f64 {
        self.betas[j - 1]
    }

    pub fn alpha(&self, j: usize) -> f64 {
        self.alphas[j - 1]
    }

    pub fn alpha_bar(&self, j: usize) -> f64 {
        self.alpha_bars[j - 1]
    }

    /// Coefficient `β_j/√(1−ᾱ_j)` in front of the predicted noise, zero
    /// when the step adds no noise.
    pub fn eps_coefficient(&self, j: usize) -> f64 {
        let beta = self.beta(j);
        if beta == 0.0 {
            0.0
        } else {
            beta / (1.0 - self.alpha_bar(j)).sqrt()
        }
    }

    fn check_step(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.steps() {
            return Err(Error::Config(format!(
                "step {j} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Sample `w^j ~ N(√ᾱ_j·w⁰, (1−ᾱ_j)·I)`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    w0: &[f64],
    j: usize,
    schedule: &BetaSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    schedule.check_step(j)?;
    let ab = schedule.alpha_bar(j);
    let (mean, sd) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(w0
        .iter()
        .map(|&w| {
            let z: f64 = StandardNormal.sample(rng);
            mean * w + sd * z
        })
        .collect())
}

/// One reverse step given the predicted noise. `noise` is ignored at `j = 1`.
pub fn denoise_step(
    schedule: &BetaSchedule,
    j: usize,
    wj: &[f64],
    eps_pred: &[f64],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    schedule.check_step(j)?;
    if wj.len() != eps_pred.len() || noise.is_some_and(|z| z.len() != wj.len()) {
        return Err(Error::Dimension("reverse step operands differ in length".into()));
    }
    let k = schedule.eps_coefficient(j);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(j).sqrt();
    let sigma = schedule.beta(j).sqrt();
    Ok(wj
        .iter()
        .zip(eps_pred)
        .enumerate()
        .map(|(i, (&w, &e))| {
            let mean = inv_sqrt_alpha * (w - k * e);
            match noise {
                Some(z) if j > 1 => mean + sigma * z[i],
                _ => mean,
            }
        })
        .collect())
}

/// `(sin, cos)` of `2^k·π·j/N` for `k < TIME_FREQUENCIES`.
pub fn time_embedding(j: usize, steps: usize) -> [f64; 2 * TIME_FREQUENCIES] {
    let t = j as f64 / steps as f64;
    let mut out = [0.0; 2 * TIME_FREQUENCIES];
    for k in 0..TIME_FREQUENCIES {
        let angle = std::f64::consts::PI * (1u32 << k) as f64 * t;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Map a raw action onto the simplex: softplus, mask, normalize.
pub fn project(w: &[f64], mask: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = w.iter().zip(mask).map(|(&x, &m)| softplus(x) * m).collect();
    let total: f64 = s.iter().sum();
    if total > 0.0 {
        s.iter().map(|v| v / total).collect()
    } else {
        let n = mask.iter().filter(|&&m| m > 0.0).count().max(1) as f64;
        mask.iter().map(|&m| if m > 0.0 { 1.0 / n } else { 0.0 }).collect()
    }
}

/// `∂L/∂w` of [`project`] given `∂L/∂fractions`.
fn project_backward(w: &[f64], mask: &[f64], fractions: &[f64], upstream: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().zip(mask).map(|(&x, &m)| softplus(x) * m).sum();
    if total <= 0.0 {
        return vec![0.0; w.len()];
    }
    let dot: f64 = upstream.iter().zip(fractions).map(|(g, f)| g * f).sum();
    w.iter()
        .zip(mask)
        .zip(upstream)
        .map(|((&x, &m), &g)| (g - dot) / total * sigmoid(x) * m)
        .collect()
}

/// The conditioning vector `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub total_power: f64,
    pub distance: f64,
    pub m_f: f64,
    pub m_s: f64,
    pub confidences: Vec<f64>,
}

impl EnvState {
    pub fn new(env: &ChannelEnv, confidences: Vec<f64>) -> Self {
        Self {
            total_power: env.total_power,
            distance: env.distance,
            m_f: env.m_f,
            m_s: env.m_s,
            confidences,
        }
    }

    pub fn objects(&self) -> usize {
        self.confidences.len()
    }

    pub fn encoded_len(u_max: usize) -> usize {
        STATE_SCALARS + 2 * u_max
    }

    /// `[P/1000, D/10, U/U_max, m_f/10, m_s/10, c padded to U_max, mask]`.
    pub fn encode(&self, u_max: usize) -> Result<Vec<f64>> {
        let u = self.objects();
        if u > u_max {
            return Err(Error::Config(format!("{u} objects exceed U_max = {u_max}")));
        }
        let mut e = Vec::with_capacity(Self::encoded_len(u_max));
        e.extend([
            self.total_power / 1000.0,
            self.distance / 10.0,
            u as f64 / u_max as f64,
            self.m_f / 10.0,
            self.m_s / 10.0,
        ]);
        e.extend(self.confidences.iter().copied());
        e.extend(std::iter::repeat_n(0.0, u_max - u));
        e.extend(std::iter::repeat_n(1.0, u));
        e.extend(std::iter::repeat_n(0.0, u_max - u));
        Ok(e)
    }
}

fn mask_of(encoded: &[f64], u_max: usize) -> &[f64] {
    &encoded[STATE_SCALARS + u_max..]
}

/// Policy architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub u_max: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub discount: f64,
    pub tau: f64,
    pub exploration_noise: f64,
    pub batch_size: usize,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub replay_capacity: usize,
    pub steps_per_episode: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            u_max: 32,
            hidden: vec![256, 256],
            activation: Activation::Relu,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            discount: 0.95,
            tau: 0.005,
            exploration_noise: 0.05,
            batch_size: 512,
            actor_learning_rate: 1e-5,
            critic_learning_rate: 1e-4,
            replay_capacity: 100_000,
            steps_per_episode: 1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.u_max == 0 {
            return bad("u_max must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden widths {:?} must be positive", self.hidden));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad(format!("discount {} outside [0, 1]", self.discount));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.exploration_noise >= 0.0) {
            return bad("exploration noise must be non-negative".into());
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.steps_per_episode == 0 {
            return bad("batch size, replay capacity and steps per episode must be positive".into());
        }
        if !(self.actor_learning_rate > 0.0 && self.critic_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        BetaSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end).map(|_| ())
    }

    pub fn state_dim(&self) -> usize {
        EnvState::encoded_len(self.u_max)
    }

    fn denoiser_widths(&self) -> Vec<usize> {
        let mut w = vec![self.u_max + self.state_dim() + 2 * TIME_FREQUENCIES];
        w.extend(&self.hidden);
        w.push(self.u_max);
        w
    }

    fn critic_widths(&self) -> Vec<usize> {
        let mut w = vec![self.state_dim() + self.u_max];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// One replay record: encoded state, executed fractions, reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub fractions: Vec<f64>,
    pub reward: f64,
}

/// Reverse-chain activations kept for backpropagation.
struct ChainTape {
    /// `(j, tape of ε_θ at step j)` in generation order, `j = N..1`.
    steps: Vec<(usize, Tape)>,
    w0: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    config: PolicyConfig,
    schedule: BetaSchedule,
    pub denoiser: Mlp,
    pub denoiser_target: Mlp,
    pub critics: [Mlp; 2],
    pub critic_targets: [Mlp; 2],
    actor_adam: AdamState,
    critic_adam: [AdamState; 2],
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<DiffusionPolicy> {
        config.validate()?;
        let schedule = BetaSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let act = config.activation;
        let denoiser = Mlp::new(&config.denoiser_widths(), act, Activation::Identity, rng)?;
        let critics = [
            Mlp::new(&config.critic_widths(), act, Activation::Identity, rng)?,
            Mlp::new(&config.critic_widths(), act, Activation::Identity, rng)?,
        ];
        let actor_adam = AdamState::new(AdamConfig::with_learning_rate(config.actor_learning_rate), &denoiser);
        let critic_cfg = AdamConfig::with_learning_rate(config.critic_learning_rate);
        let critic_adam = [
            AdamState::new(critic_cfg, &critics[0]),
            AdamState::new(critic_cfg, &critics[1]),
        ];
        Ok(DiffusionPolicy {
            denoiser_target: denoiser.clone(),
            critic_targets: critics.clone(),
            config,
            schedule,
            denoiser,
            critics,
            actor_adam,
            critic_adam,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn schedule(&self) -> &BetaSchedule {
        &self.schedule
    }

    /// Replace the noise schedule, e.g. with a noiseless one for testing.
    pub fn set_schedule(&mut self, schedule: BetaSchedule) {
        self.schedule = schedule;
    }

    fn denoiser_input(&self, w: &Array2<f64>, states: &Array2<f64>, j: usize) -> Array2<f64> {
        let emb = time_embedding(j, self.schedule.steps());
        let t = Array2::from_shape_fn((w.nrows(), emb.len()), |(_, k)| emb[k]);
        concatenate![Axis(1), *w, *states, t]
    }

    /// Run the reverse chain of `net` for a batch of encoded states.
    fn run_chain<R: Rng + ?Sized>(
        &self,
        net: &Mlp,
        states: &Array2<f64>,
        rng: &mut R,
        record: bool,
    ) -> Result<(Array2<f64>, Option<ChainTape>)> {
        let (b, u) = (states.nrows(), self.config.u_max);
        let mut w = Array2::from_shape_simple_fn((b, u), || StandardNormal.sample(rng));
        let mut steps = Vec::new();
        for j in (1..=self.schedule.steps()).rev() {
            let input = self.denoiser_input(&w, states, j);
            let eps = if record {
                let tape = net.forward_tape(input.view())?;
                let eps = tape.output().clone();
                steps.push((j, tape));
                eps
            } else {
                net.forward(input.view())?
            };
            let k = self.schedule.eps_coefficient(j);
            let inv = 1.0 / self.schedule.alpha(j).sqrt();
            w = (&w - &(eps * k)) * inv;
            if j > 1 {
                let sigma = self.schedule.beta(j).sqrt();
                w.mapv_inplace(|v| v + sigma * Distribution::<f64>::sample(&StandardNormal, rng));
            }
        }
        let tape = record.then(|| ChainTape {
            steps,
            w0: w.clone(),
        });
        Ok((w, tape))
    }

    fn project_rows(&self, w: &Array2<f64>, states: &Array2<f64>) -> Array2<f64> {
        let u = self.config.u_max;
        let mut out = Array2::zeros(w.raw_dim());
        for (r, (wr, er)) in w.rows().into_iter().zip(states.rows()).enumerate() {
            let e = er.to_vec();
            let f = project(&wr.to_vec(), mask_of(&e, u));
            out.row_mut(r).assign(&Array1::from(f));
        }
        out
    }

    /// Raw action `w⁰` for one state, before projection.
    pub fn sample_raw<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> Result<Vec<f64>> {
        let e = state.encode(self.config.u_max)?;
        let states = Array2::from_shape_vec((1, e.len()), e).expect("row vector");
        let (w, _) = self.run_chain(&self.denoiser, &states, rng, false)?;
        Ok(w.into_raw_vec_and_offset().0)
    }

    /// Fractions for the real objects, summing to one.
    fn fractions_for(&self, state: &EnvState, raw: &[f64]) -> Result<Vec<f64>> {
        let e = state.encode(self.config.u_max)?;
        let f = project(raw, mask_of(&e, self.config.u_max));
        Ok(f[..state.objects()].to_vec())
    }

    /// Denoise fresh Gaussian noise into a feasible allocation.
    pub fn generate_scheme<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> Result<PowerVector> {
        let raw = self.sample_raw(state, rng)?;
        Ok(scale_fractions(&self.fractions_for(state, &raw)?, state.total_power))
    }

    /// Like [`generate_scheme`](Self::generate_scheme) with exploration noise
    /// added to `w⁰` before projection. Returns the padded fractions too.
    pub fn explore<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> Result<(PowerVector, Vec<f64>)> {
        let mut raw = self.sample_raw(state, rng)?;
        let sd = self.config.exploration_noise;
        raw.iter_mut()
            .for_each(|v| *v += sd * Distribution::<f64>::sample(&StandardNormal, rng));
        let e = state.encode(self.config.u_max)?;
        let padded = project(&raw, mask_of(&e, self.config.u_max));
        let powers = scale_fractions(&padded[..state.objects()], state.total_power);
        Ok((powers, padded))
    }

    /// Number of real objects in each encoded state.
    fn object_counts(&self, states: &Array2<f64>) -> Array1<f64> {
        let u = self.config.u_max;
        states.slice(s![.., STATE_SCALARS + u..]).sum_axis(Axis(1))
    }

    /// Critics see relative powers `U·f_i`, which average one over the real
    /// objects whatever `U` is.
    fn critic_input(&self, states: &Array2<f64>, fractions: &Array2<f64>) -> Array2<f64> {
        let scaled = fractions * &self.object_counts(states).insert_axis(Axis(1));
        concatenate![Axis(1), *states, scaled]
    }

    /// `r + γ·min(Q₁'(e, w'), Q₂'(e, w'))` with `w'` drawn from the target
    /// denoiser on the same states.
    pub fn critic_targets_for<R: Rng + ?Sized>(
        &self,
        states: &Array2<f64>,
        rewards: &Array1<f64>,
        rng: &mut R,
    ) -> Result<Array1<f64>> {
        let (w, _) = self.run_chain(&self.denoiser_target, states, rng, false)?;
        let next = self.project_rows(&w, states);
        let input = self.critic_input(states, &next);
        let q1 = self.critic_targets[0].forward(input.view())?;
        let q2 = self.critic_targets[1].forward(input.view())?;
        Ok(bellman_target(
            rewards,
            &q1.column(0).to_owned(),
            &q2.column(0).to_owned(),
            self.config.discount,
        ))
    }

    /// One gradient step on both critics and the denoiser, then soft target
    /// updates.
    ///
    /// `reward_offset` is subtracted from every stored reward. Centering the
    /// rewards shifts all action values by the same constant, which leaves
    /// the greedy policy unchanged but keeps the critics near zero.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Transition],
        reward_offset: f64,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Config("empty training batch".into()));
        }
        let (sd, u) = (self.config.state_dim(), self.config.u_max);
        let states = Array2::from_shape_fn((b, sd), |(r, c)| batch[r].state[c]);
        let actions = Array2::from_shape_fn((b, u), |(r, c)| batch[r].fractions[c]);
        let rewards = Array1::from_iter(batch.iter().map(|t| t.reward - reward_offset));

        let y = self.critic_targets_for(&states, &rewards, rng)?;
        let input = self.critic_input(&states, &actions);
        let mut critic_loss = 0.0;
        let mut critic_grad_norm: f64 = 0.0;
        for k in 0..2 {
            let tape = self.critics[k].forward_tape(input.view())?;
            let diff = &tape.output().column(0) - &y;
            critic_loss += diff.mapv(|d| d * d).mean().unwrap_or(0.0);
            let upstream = diff.mapv(|d| 2.0 * d / b as f64).insert_axis(Axis(1));
            let (g, _) = self.critics[k].backward(&tape, upstream.view())?;
            critic_grad_norm = critic_grad_norm.max(g.norm());
            self.critic_adam[k].step(&mut self.critics[k], &g)?;
        }

        let (actor_loss, grads) = self.actor_gradient(&states, rng)?;
        let actor_grad_norm = grads.norm();
        let stats = UpdateStats {
            critic_loss,
            actor_loss,
            actor_grad_norm,
            critic_grad_norm,
        };
        if !(critic_loss.is_finite() && actor_loss.is_finite() && actor_grad_norm.is_finite()) {
            return Err(Error::Diverged {
                step: self.actor_adam.step as usize,
                diagnostics: format!(
                    "critic loss {critic_loss}, actor loss {actor_loss}, actor |g| {actor_grad_norm}, critic |g| {critic_grad_norm}, lr actor {}, lr critic {}",
                    self.config.actor_learning_rate, self.config.critic_learning_rate
                ),
            });
        }
        self.actor_adam.step(&mut self.denoiser, &grads)?;

        let tau = self.config.tau;
        soft_update(&mut self.denoiser_target, &self.denoiser, tau)?;
        for k in 0..2 {
            soft_update(&mut self.critic_targets[k], &self.critics[k], tau)?;
        }
        Ok(stats)
    }

    /// Loss `−mean Q₁(e, project(w⁰))` and its gradient with respect to the
    /// denoiser parameters, through the full reverse chain.
    pub fn actor_gradient<R: Rng + ?Sized>(
        &self,
        states: &Array2<f64>,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        let (b, u) = (states.nrows(), self.config.u_max);
        let (_, tape) = self.run_chain(&self.denoiser, states, rng, true)?;
        let tape = tape.expect("recorded chain");
        let fractions = self.project_rows(&tape.w0, states);
        let input = self.critic_input(states, &fractions);
        let q_tape = self.critics[0].forward_tape(input.view())?;
        let loss = -q_tape.output().column(0).mean().unwrap_or(0.0);
        let upstream = Array2::from_elem((b, 1), -1.0 / b as f64);
        let (_, d_input) = self.critics[0].backward(&q_tape, upstream.view())?;
        let d_frac = &d_input.slice(s![.., self.config.state_dim()..])
            * &self.object_counts(states).insert_axis(Axis(1));

        // Through the projection.
        let mut g = Array2::zeros((b, u));
        for r in 0..b {
            let e = states.row(r).to_vec();
            let grad = project_backward(
                &tape.w0.row(r).to_vec(),
                mask_of(&e, u),
                &fractions.row(r).to_vec(),
                &d_frac.row(r).to_vec(),
            );
            g.row_mut(r).assign(&Array1::from(grad));
        }

        // Through the chain, from j = 1 back to j = N. At step j,
        // w^{j−1} = (w^j − k_j·ε)/√α_j + σ_j·z, so
        // ∂L/∂ε = −k_j/√α_j·g and ∂L/∂w^j = g/√α_j + (∂ε/∂w^j)ᵀ∂L/∂ε.
        let mut total = Gradients::zeros_like(&self.denoiser);
        for (j, step_tape) in tape.steps.iter().rev() {
            let inv = 1.0 / self.schedule.alpha(*j).sqrt();
            let k = self.schedule.eps_coefficient(*j);
            let d_eps = &g * (-k * inv);
            let (pg, d_in) = self.denoiser.backward(step_tape, d_eps.view())?;
            total.add_assign(&pg);
            g = &g * inv + d_in.slice(s![.., ..u]);
        }
        Ok((loss, total))
    }

    pub fn to_snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            config: self.config.clone(),
            betas: self.schedule.betas.clone(),
            denoiser: self.denoiser.to_snapshot(),
            denoiser_target: self.denoiser_target.to_snapshot(),
            critics: [self.critics[0].to_snapshot(), self.critics[1].to_snapshot()],
            critic_targets: [
                self.critic_targets[0].to_snapshot(),
                self.critic_targets[1].to_snapshot(),
            ],
            actor_adam: self.actor_adam.clone(),
            critic_adam: self.critic_adam.clone(),
        }
    }

    pub fn from_snapshot(s: &PolicySnapshot) -> Result<DiffusionPolicy> {
        s.config.validate()?;
        let policy = DiffusionPolicy {
            config: s.config.clone(),
            schedule: BetaSchedule::from_betas(s.betas.clone())?,
            denoiser: Mlp::from_snapshot(&s.denoiser)?,
            denoiser_target: Mlp::from_snapshot(&s.denoiser_target)?,
            critics: [Mlp::from_snapshot(&s.critics[0])?, Mlp::from_snapshot(&s.critics[1])?],
            critic_targets: [
                Mlp::from_snapshot(&s.critic_targets[0])?,
                Mlp::from_snapshot(&s.critic_targets[1])?,
            ],
            actor_adam: s.actor_adam.clone(),
            critic_adam: s.critic_adam.clone(),
        };
        if policy.denoiser.widths() != s.config.denoiser_widths()
            || policy.critics[0].widths() != s.config.critic_widths()
        {
            return Err(Error::Dimension("checkpoint networks do not match its config".into()));
        }
        Ok(policy)
    }
}

/// `r + γ·min(q1, q2)` elementwise.
pub fn bellman_target(rewards: &Array1<f64>, q1: &Array1<f64>, q2: &Array1<f64>, gamma: f64) -> Array1<f64> {
    let mut y = rewards.clone();
    for ((y, a), b) in y.iter_mut().zip(q1).zip(q2) {
        *y += gamma * a.min(*b);
    }
    y
}

fn scale_fractions(fractions: &[f64], total: f64) -> PowerVector {
    PowerVector {
        powers: fractions.iter().map(|f| total * f).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub config: PolicyConfig,
    pub betas: Vec<f64>,
    pub denoiser: MlpSnapshot,
    pub denoiser_target: MlpSnapshot,
    pub critics: [MlpSnapshot; 2],
    pub critic_targets: [MlpSnapshot; 2],
    pub actor_adam: AdamState,
    pub critic_adam: [AdamState; 2],
}

/// A trained policy used through the common allocator contract.
pub struct DiffusionAllocator {
    pub policy: DiffusionPolicy,
    rng: ChaCha8Rng,
}

impl DiffusionAllocator {
    pub fn new(policy: DiffusionPolicy, seed: u64) -> Self {
        Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Allocator for DiffusionAllocator {
    fn name(&self) -> &str {
        "diffusion"
    }

    fn allocate(&mut self, req: &AllocationRequest) -> Result<PowerVector> {
        let state = EnvState::new(&req.env, req.confidences.clone());
        self.policy.generate_scheme(&state, &mut self.rng)
    }
}

/// Source of states and rewards for training.
pub trait RewardEnv {
    fn state(&self) -> &EnvState;
    fn reward(&self, powers: &PowerVector) -> Result<f64>;
}

/// A fixed scene scored by its reward surrogate.
#[derive(Debug, Clone)]
pub struct SurrogateEnv {
    pub state: EnvState,
    pub surrogate: RewardSurrogate,
}

impl SurrogateEnv {
    pub fn new(surrogate: RewardSurrogate) -> Self {
        Self {
            state: EnvState::new(&surrogate.env, surrogate.confidences.clone()),
            surrogate,
        }
    }
}

impl RewardEnv for SurrogateEnv {
    fn state(&self) -> &EnvState {
        &self.state
    }

    fn reward(&self, powers: &PowerVector) -> Result<f64> {
        self.surrogate.score(&powers.powers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub reward: f64,
    pub loss: f64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub policy: DiffusionPolicy,
    pub buffer: ReplayBuffer<Transition>,
    pub curve: Vec<CurvePoint>,
    pub seed: u64,
}

impl Trainer {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Trainer> {
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        let capacity = config.replay_capacity;
        Ok(Trainer {
            policy: DiffusionPolicy::new(config, &mut init)?,
            buffer: ReplayBuffer::new(capacity)?,
            curve: Vec::new(),
            seed,
        })
    }

    pub fn episodes_done(&self) -> usize {
        self.curve.len()
    }

    /// Run `episodes` more episodes. Episode `k` draws all randomness from a
    /// stream derived from `(seed, k)`, so stopping and resuming reproduces an
    /// uninterrupted run exactly.
    pub fn train<E: RewardEnv>(&mut self, env: &E, episodes: usize) -> Result<&[CurvePoint]> {
        self.train_with(env, episodes, |_| {})
    }

    pub fn train_with<E: RewardEnv, F: FnMut(&CurvePoint)>(
        &mut self,
        env: &E,
        episodes: usize,
        mut on_episode: F,
    ) -> Result<&[CurvePoint]> {
        let start = self.curve.len();
        let state = env.state().clone();
        let encoded = state.encode(self.policy.config.u_max)?;
        for episode in start..start + episodes {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, episode as u64));
            let steps = self.policy.config.steps_per_episode;
            let (mut reward_sum, mut loss_sum) = (0.0, 0.0);
            for _ in 0..steps {
                let (powers, fractions) = self.policy.explore(&state, &mut rng)?;
                let reward = env.reward(&powers)?;
                self.buffer.push(Transition {
                    state: encoded.clone(),
                    fractions,
                    reward,
                });
                let batch = self.buffer.sample(self.policy.config.batch_size, &mut rng);
                let offset = self.buffer.iter().map(|t| t.reward).sum::<f64>() / self.buffer.len() as f64;
                let stats = self.policy.update(&batch, offset, &mut rng)?;
                reward_sum += reward;
                loss_sum += stats.critic_loss;
            }
            let point = CurvePoint {
                episode,
                reward: reward_sum / steps as f64,
                loss: loss_sum / steps as f64,
            };
            on_episode(&point);
            self.curve.push(point);
        }
        Ok(&self.curve[start..])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            policy: self.policy.to_snapshot(),
            replay_capacity: self.buffer.capacity(),
            replay: self.buffer.iter().cloned().collect(),
            curve: self.curve.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Trainer> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let mut buffer = ReplayBuffer::new(c.replay_capacity)?;
        c.replay.iter().cloned().for_each(|t| buffer.push(t));
        Ok(Trainer {
            policy: DiffusionPolicy::from_snapshot(&c.policy)?,
            buffer,
            curve: c.curve.clone(),
            seed: c.seed,
        })
    }
}

pub const CHECKPOINT_FORMAT: &str = "semcom-diffusion-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: policy, optimizer moments, replay contents and curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub policy: PolicySnapshot,
    pub replay_capacity: usize,
    pub replay: Vec<Transition>,
    pub curve: Vec<CurvePoint>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        Ok(serde_json::from_str(text)?)
    }
}

/// View rows of a matrix as `Vec`s; small helper for callers holding batches.
pub fn rows(m: ArrayView2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}
