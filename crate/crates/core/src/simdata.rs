//! Synthetic data: the three-cluster protein trajectory benchmark and a
//! prior-predictive generator for the nested model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nested::{NestedModelConfig, NestedState};
use crate::rng::{draw_categorical, draw_standard_normal, SeededRng};

pub const N_TRUE_CLUSTERS: usize = 3;

/// Simulation truth for the protein benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProteinSimTruth {
    pub n_subjects: usize,
    pub n_proteins: usize,
    pub pi: [f64; N_TRUE_CLUSTERS],
    pub alpha_tilde: [f64; N_TRUE_CLUSTERS],
    pub delta_sd: f64,
    pub noise_sd: [f64; N_TRUE_CLUSTERS],
    /// Explicit per-subject offsets used instead of random ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_override: Option<Vec<f64>>,
}

impl Default for ProteinSimTruth {
    fn default() -> Self {
        ProteinSimTruth {
            n_subjects: 20,
            n_proteins: 100,
            pi: [0.25, 0.30, 0.45],
            alpha_tilde: [0.0, -3.0, 1.0],
            delta_sd: 0.1,
            noise_sd: [0.2, 0.5, 1.0],
            delta_override: None,
        }
    }
}

impl ProteinSimTruth {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 || self.n_proteins == 0 {
            return Err(Error::Validation("need at least two subjects and one protein".into()));
        }
        if self.pi.iter().any(|p| !(*p >= 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("cluster weights {:?} must be nonnegative and sum to 1", self.pi)));
        }
        if !(self.delta_sd >= 0.0) || self.noise_sd.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Validation("standard deviations must be nonnegative".into()));
        }
        if let Some(d) = &self.delta_override {
            if d.len() != self.n_subjects {
                return Err(Error::Validation(format!(
                    "delta override has {} entries for {} subjects",
                    d.len(),
                    self.n_subjects
                )));
            }
        }
        Ok(())
    }

    /// Noiseless cluster curve without the subject offset.
    pub fn mean_curve(&self, cluster: usize, t: f64) -> f64 {
        let a = self.alpha_tilde[cluster];
        let t3 = t * t * t;
        match cluster {
            0 => a + 2.0 * t + 3.0 * t3,
            1 => a - 2.0 * t + t3,
            _ => a + t - 3.0 * t3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinSim {
    /// I×J responses.
    pub data: DMatrix<f64>,
    /// Subject times on `[0, 1]`.
    pub times: Vec<f64>,
    /// Condition indicators; all subjects share one condition.
    pub conditions: Vec<u8>,
    pub true_s: Vec<usize>,
    pub true_delta: Vec<f64>,
    pub true_alpha: Vec<f64>,
}

/// `y_ij = f_{s_i}(t_j) + δ_j + ε_ij`, `ε_ij ~ N(0, σ²_{s_i})`,
/// `s_i ~ Cat(π)`, `t_j ~ U(0, 1)`, `δ_j ~ N(0, delta_sd²)`.
pub fn simulate_protein(truth: &ProteinSimTruth, rng: &mut SeededRng) -> Result<ProteinSim> {
    truth.validate()?;
    let (n_i, n_j) = (truth.n_proteins, truth.n_subjects);
    let times: Vec<f64> = (0..n_j).map(|_| rng.uniform()).collect();
    let true_delta = match &truth.delta_override {
        Some(d) => d.clone(),
        None => (0..n_j)
            .map(|_| truth.delta_sd * draw_standard_normal(rng))
            .collect(),
    };
    let true_s = (0..n_i)
        .map(|_| draw_categorical(&truth.pi, rng))
        .collect::<Result<Vec<_>>>()?;
    let true_alpha = true_s.iter().map(|&s| truth.alpha_tilde[s]).collect();
    let mut data = DMatrix::zeros(n_i, n_j);
    for i in 0..n_i {
        let s = true_s[i];
        for j in 0..n_j {
            let mean = truth.mean_curve(s, times[j]) + true_delta[j];
            data[(i, j)] = mean + truth.noise_sd[s] * draw_standard_normal(rng);
        }
    }
    Ok(ProteinSim {
        data,
        times,
        conditions: vec![0; n_j],
        true_s,
        true_delta,
        true_alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedSim {
    pub data: DMatrix<f64>,
    pub truth: NestedState,
}

/// Draw a state from the nested prior, then data from the likelihood.
///
/// With `separation = Some(s)` every atom variance is fixed to the prior
/// scale `σ² = b0/a0` and the means are spaced as `m0 + ℓ·s·σ`.
pub fn simulate_nested(
    config: &NestedModelConfig,
    n_rows: usize,
    n_cols: usize,
    rng: &mut SeededRng,
    separation: Option<f64>,
) -> Result<NestedSim> {
    if let Some(s) = separation {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::Validation(format!("separation must be nonnegative, got {s}")));
        }
    }
    let mut state = NestedState::from_prior(config, n_rows, n_cols, rng)?;
    if let Some(s) = separation {
        let p = &config.atom_prior;
        let sigma2 = p.b0 / p.a0;
        for l in 0..config.l {
            state.mu[l] = p.m0 + l as f64 * s * sigma2.sqrt();
            state.sigma2[l] = sigma2;
        }
    }
    let data = sample_nested_data(&state, rng)?;
    Ok(NestedSim { data, truth: state })
}

/// `y_ij ~ N(μ_ℓ, σ²_ℓ)` with `ℓ = M_{i,S_j}`.
pub fn sample_nested_data(state: &NestedState, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
    let p = &state.partition;
    let mut data = DMatrix::zeros(p.n_rows(), p.n_cols());
    for j in 0..p.n_cols() {
        for i in 0..p.n_rows() {
            let l = p.cell_label(i, j);
            data[(i, j)] = state.mu[l] + state.sigma2[l].sqrt() * draw_standard_normal(rng);
        }
    }
    Ok(data)
}
