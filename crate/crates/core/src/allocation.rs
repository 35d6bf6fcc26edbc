//! Per-object transmit power allocation under the total budget `Σ p_i ≤ P`.
//!
//! Every allocator here spends the whole budget: nothing in the quality model
//! rewards holding power back.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelEnv;
use crate::error::{Error, Result};

/// Slack allowed on the budget when checking a power vector.
pub const BUDGET_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRequest {
    pub confidences: Vec<f64>,
    pub env: ChannelEnv,
}

impl AllocationRequest {
    pub fn new(confidences: Vec<f64>, env: ChannelEnv) -> Self {
        Self { confidences, env }
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerVector {
    pub powers: Vec<f64>,
}

impl PowerVector {
    pub fn total(&self) -> f64 {
        self.powers.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }

    /// Check `p_i ≥ 0` and `Σ p_i ≤ budget + 1e-9`.
    pub fn check_budget(&self, budget: f64) -> Result<()> {
        if let Some((i, p)) = self
            .powers
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0) || !p.is_finite())
        {
            return Err(Error::Config(format!("power {i} is {p}")));
        }
        let total = self.total();
        if total > budget + BUDGET_TOLERANCE {
            return Err(Error::Config(format!(
                "allocation uses {total} W of a {budget} W budget"
            )));
        }
        Ok(())
    }
}

/// Common contract for power allocators.
pub trait Allocator {
    fn name(&self) -> &str;
    fn allocate(&mut self, req: &AllocationRequest) -> Result<PowerVector>;
}

/// Uniform split `p_i = P/U` (Avg-SemCom).
pub fn allocate_avg(req: &AllocationRequest) -> PowerVector {
    let u = req.len();
    let share = req.env.total_power / u.max(1) as f64;
    PowerVector {
        powers: vec![share; u],
    }
}

fn raw_conf_weights(confidences: &[f64], eta: f64) -> Vec<f64> {
    confidences.iter().map(|c| c.powf(eta)).collect()
}

/// Priority weights `c_i^η`, normalized to sum to one.
pub fn conf_weights(confidences: &[f64], eta: f64) -> Vec<f64> {
    let raw = raw_conf_weights(confidences, eta);
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Proportional split `p_i = P·c_i^η / Σ_j c_j^η` (Conf-SemCom).
///
/// Computed as `(P·w_i)/Σw` so that `η = 0` reproduces [`allocate_avg`]
/// bit for bit.
pub fn allocate_conf(req: &AllocationRequest, eta: f64) -> PowerVector {
    let raw = raw_conf_weights(&req.confidences, eta);
    let total: f64 = raw.iter().sum();
    PowerVector {
        powers: raw
            .into_iter()
            .map(|w| req.env.total_power * w / total)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AvgAllocator;

impl Allocator for AvgAllocator {
    fn name(&self) -> &str {
        "avg"
    }

    fn allocate(&mut self, req: &AllocationRequest) -> Result<PowerVector> {
        Ok(allocate_avg(req))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConfAllocator {
    pub eta: f64,
}

impl Allocator for ConfAllocator {
    fn name(&self) -> &str {
        "conf"
    }

    fn allocate(&mut self, req: &AllocationRequest) -> Result<PowerVector> {
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!("eta = {} must be >= 0", self.eta)));
        }
        Ok(allocate_conf(req, self.eta))
    }
}
