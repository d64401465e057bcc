//! Finite stick-breaking weights shared by both samplers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{draw_beta, ln_beta_pdf, SeededRng};

/// Stick proportions `V_1..V_T` (with `V_T = 1`) and the implied weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickWeights {
    pub sticks: Vec<f64>,
    pub weights: Vec<f64>,
}

impl StickWeights {
    pub fn from_sticks(sticks: Vec<f64>) -> Result<Self> {
        if sticks.is_empty() {
            return Err(Error::Validation("stick-breaking needs at least one stick".into()));
        }
        if let Some(v) = sticks.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("stick proportion {v} outside [0,1]")));
        }
        let mut sticks = sticks;
        *sticks.last_mut().unwrap() = 1.0;
        let weights = weights_from_sticks(&sticks);
        Ok(StickWeights { sticks, weights })
    }

    /// Draw from the truncated GEM(mass) prior.
    pub fn prior(truncation: usize, mass: f64, rng: &mut SeededRng) -> Result<Self> {
        update_stick_weights(&vec![0; truncation], mass, rng)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Log prior density of the free sticks, `Σ_{h<T} ln Be(V_h; 1, mass)`.
    pub fn ln_prior(&self, mass: f64) -> f64 {
        ln_stick_prior(&self.sticks, mass)
    }
}

/// `π_h = V_h Π_{ℓ<h} (1 − V_ℓ)`.
pub fn weights_from_sticks(sticks: &[f64]) -> Vec<f64> {
    let mut remaining = 1.0;
    sticks
        .iter()
        .map(|&v| {
            let w = v * remaining;
            remaining *= 1.0 - v;
            w
        })
        .collect()
}

pub fn ln_stick_prior(sticks: &[f64], mass: f64) -> f64 {
    let free = sticks.len().saturating_sub(1);
    sticks[..free].iter().map(|&v| ln_beta_pdf(v, 1.0, mass)).sum()
}

/// Beta parameters of the free sticks given occupancy counts,
/// `V_h ~ Be(1 + n_h, mass + Σ_{ℓ>h} n_ℓ)` for `h < T`.
pub fn stick_conditional(counts: &[usize], mass: f64) -> Result<Vec<(f64, f64)>> {
    if counts.is_empty() {
        return Err(Error::Validation("stick-breaking needs at least one stick".into()));
    }
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::Parameter(format!("stick-breaking mass must be positive, got {mass}")));
    }
    let mut tail: usize = counts.iter().sum();
    Ok(counts[..counts.len() - 1]
        .iter()
        .map(|&n| {
            tail -= n;
            (1.0 + n as f64, mass + tail as f64)
        })
        .collect())
}

/// Conditional draw of the sticks given occupancy counts, `V_T = 1`.
pub fn update_stick_weights(counts: &[usize], mass: f64, rng: &mut SeededRng) -> Result<StickWeights> {
    let params = stick_conditional(counts, mass)?;
    let mut sticks = Vec::with_capacity(counts.len());
    for (a, b) in params {
        sticks.push(draw_beta(a, b, rng)?);
    }
    sticks.push(1.0);
    let weights = weights_from_sticks(&sticks);
    Ok(StickWeights { sticks, weights })
}
