//! ANOVA DDP mixture of spline regressions for a protein × subject matrix.
//!
//! With cluster labels `s_i ∈ 0..H`,
//!
//! ```text
//! y_ij | s_i = h ~ N(α_i + δ_{t_j} + x_j'β̃_h, σ̃²_h)
//! β̃_h ~ N(β₀, σ²_β0 I),  σ̃²_h ~ InvGa(a₀, b₀),  π ~ GEM_H(ξ)
//! δ_t ~ N(ζ, ω²),        α_i ~ N(μ₀, σ²₀)
//! ```
//!
//! The blocked Gibbs sampler updates labels, sticks, cluster atoms, time
//! offsets and protein offsets in that order. Time and protein offsets use
//! the conjugate normal update on linear residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::ChainSettings;
use crate::partition::occupancy;
use crate::rng::{
    draw_categorical, draw_categorical_log, draw_inverse_gamma, draw_normal, draw_standard_normal,
    ln_inv_gamma_pdf, ln_normal_pdf, softmax, SeededRng,
};
use crate::spline::{RegressionDesign, NUM_BASIS, NUM_COVARIATES};
use crate::sticks::{update_stick_weights, StickWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpConfig {
    /// Truncation level.
    pub h: usize,
    /// DP total mass.
    pub xi: f64,
    pub beta0: Vec<f64>,
    /// Prior sd of each coefficient; `Σ₀ = σ²_β0 I`.
    pub sigma_beta0: f64,
    pub a0: f64,
    pub b0: f64,
    pub zeta: f64,
    /// Prior variance of the time offsets.
    pub omega2: f64,
    pub mu0: f64,
    pub sigma02: f64,
}

impl Default for DdpConfig {
    fn default() -> Self {
        DdpConfig {
            h: 25,
            xi: 1.0,
            beta0: vec![0.0; NUM_COVARIATES],
            sigma_beta0: 1.0,
            a0: 1.0,
            b0: 1.0,
            zeta: 0.0,
            omega2: 0.01,
            mu0: 3.0,
            sigma02: 5.0,
        }
    }
}

impl DdpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::Validation("truncation H must be positive".into()));
        }
        if self.beta0.len() != NUM_COVARIATES {
            return Err(Error::Validation(format!(
                "beta0 has {} entries, expected {NUM_COVARIATES}",
                self.beta0.len()
            )));
        }
        for (name, v) in [
            ("xi", self.xi),
            ("sigma_beta0", self.sigma_beta0),
            ("a0", self.a0),
            ("b0", self.b0),
            ("omega2", self.omega2),
            ("sigma02", self.sigma02),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.zeta.is_finite() && self.mu0.is_finite() && self.beta0.iter().all(|b| b.is_finite())) {
            return Err(Error::Validation("prior locations must be finite".into()));
        }
        Ok(())
    }

    fn prior_precision(&self) -> f64 {
        1.0 / (self.sigma_beta0 * self.sigma_beta0)
    }
}

/// Full latent state `(s, V/π, β̃, σ̃², δ, α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpState {
    pub labels: Vec<usize>,
    pub pi: StickWeights,
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl DdpState {
    pub fn from_prior(config: &DdpConfig, n_proteins: usize, n_times: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let pi = StickWeights::prior(config.h, config.xi, rng)?;
        let labels = (0..n_proteins)
            .map(|_| draw_categorical(&pi.weights, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut beta = Vec::with_capacity(config.h);
        let mut sigma2 = Vec::with_capacity(config.h);
        for _ in 0..config.h {
            beta.push(
                config
                    .beta0
                    .iter()
                    .map(|&b| draw_normal(b, config.sigma_beta0, rng))
                    .collect::<Result<Vec<_>>>()?,
            );
            sigma2.push(draw_inverse_gamma(config.a0, config.b0, rng)?);
        }
        let delta = (0..n_times)
            .map(|_| draw_normal(config.zeta, config.omega2.sqrt(), rng))
            .collect::<Result<Vec<_>>>()?;
        let alpha = (0..n_proteins)
            .map(|_| draw_normal(config.mu0, config.sigma02.sqrt(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DdpState {
            labels,
            pi,
            beta,
            sigma2,
            delta,
            alpha,
        })
    }

    pub fn validate(&self, data: &DMatrix<f64>, design: &RegressionDesign, config: &DdpConfig) -> Result<()> {
        if data.nrows() != self.labels.len() || data.nrows() != self.alpha.len() {
            return Err(Error::Validation(format!(
                "state covers {} proteins, data has {}",
                self.labels.len(),
                data.nrows()
            )));
        }
        if data.ncols() != design.n_subjects() {
            return Err(Error::Validation(format!(
                "data has {} subjects, design has {}",
                data.ncols(),
                design.n_subjects()
            )));
        }
        if self.delta.len() != design.n_times() {
            return Err(Error::Validation("one time offset per unique time expected".into()));
        }
        if self.pi.len() != config.h || self.beta.len() != config.h || self.sigma2.len() != config.h {
            return Err(Error::Validation("atom dimensions differ from H".into()));
        }
        if self.beta.iter().any(|b| b.len() != NUM_COVARIATES) {
            return Err(Error::Validation("coefficient vectors must have 12 entries".into()));
        }
        if let Some(&s) = self.labels.iter().find(|&&s| s >= config.h) {
            return Err(Error::Validation(format!("label {s} >= H")));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("cluster variances must be positive".into()));
        }
        Ok(())
    }

    pub fn n_occupied(&self) -> usize {
        occupancy(&self.labels, self.pi.len()).iter().filter(|&&n| n > 0).count()
    }

    /// Relabel atoms in decreasing order of coefficient norm; labels, weights
    /// and variances follow. Used only on archived draws for display.
    pub fn reorder_atoms_by_norm(&self) -> DdpState {
        let h = self.beta.len();
        let mut order: Vec<usize> = (0..h).collect();
        let norm = |b: &Vec<f64>| b.iter().map(|v| v * v).sum::<f64>();
        order.sort_by(|&a, &b| norm(&self.beta[b]).total_cmp(&norm(&self.beta[a])).then(a.cmp(&b)));
        let mut new_of_old = vec![0; h];
        for (new, &old) in order.iter().enumerate() {
            new_of_old[old] = new;
        }
        let weights: Vec<f64> = order.iter().map(|&o| self.pi.weights[o]).collect();
        DdpState {
            labels: self.labels.iter().map(|&s| new_of_old[s]).collect(),
            pi: StickWeights {
                sticks: self.pi.sticks.clone(),
                weights,
            },
            beta: order.iter().map(|&o| self.beta[o].clone()).collect(),
            sigma2: order.iter().map(|&o| self.sigma2[o]).collect(),
            delta: self.delta.clone(),
            alpha: self.alpha.clone(),
        }
    }
}

/// Fitted spline part `x_j'β̃_h` for every atom and subject (H × J).
fn atom_curves(state: &DdpState, design: &RegressionDesign) -> Vec<Vec<f64>> {
    let x = &design.design.x;
    state
        .beta
        .iter()
        .map(|b| {
            (0..x.nrows())
                .map(|j| (0..NUM_COVARIATES).map(|c| x[(j, c)] * b[c]).sum())
                .collect()
        })
        .collect()
}

/// Log prior of the parameters (sticks, atoms, offsets); labels excluded.
pub fn ln_parameter_prior(state: &DdpState, config: &DdpConfig) -> f64 {
    let sb2 = config.sigma_beta0 * config.sigma_beta0;
    let mut lp = state.pi.ln_prior(config.xi);
    for (b, &s2) in state.beta.iter().zip(&state.sigma2) {
        lp += b.iter().zip(&config.beta0).map(|(&v, &m)| ln_normal_pdf(v, m, sb2)).sum::<f64>();
        lp += ln_inv_gamma_pdf(s2, config.a0, config.b0);
    }
    lp += state.delta.iter().map(|&d| ln_normal_pdf(d, config.zeta, config.omega2)).sum::<f64>();
    lp += state.alpha.iter().map(|&a| ln_normal_pdf(a, config.mu0, config.sigma02)).sum::<f64>();
    lp
}

/// Log prior including the label terms `Σ_i ln π_{s_i}`.
pub fn ln_prior(state: &DdpState, config: &DdpConfig) -> f64 {
    ln_parameter_prior(state, config) + state.labels.iter().map(|&s| state.pi.weights[s].ln()).sum::<f64>()
}

pub fn log_joint(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, config: &DdpConfig) -> Result<f64> {
    state.validate(data, design, config)?;
    Ok(log_joint_unchecked(state, data, design, config))
}

pub(crate) fn log_joint_unchecked(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, config: &DdpConfig) -> f64 {
    let curves = atom_curves(state, design);
    let mut lp = ln_prior(state, config);
    for i in 0..data.nrows() {
        let h = state.labels[i];
        for j in 0..data.ncols() {
            let mean = state.alpha[i] + state.delta[design.time_index[j]] + curves[h][j];
            lp += ln_normal_pdf(data[(i, j)], mean, state.sigma2[h]);
        }
    }
    lp
}

fn label_log_weights_with(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, curves: &[Vec<f64>], i: usize) -> Vec<f64> {
    (0..state.beta.len())
        .map(|h| {
            let s2 = state.sigma2[h];
            let mut lw = state.pi.weights[h].ln();
            for j in 0..data.ncols() {
                let mean = state.alpha[i] + state.delta[design.time_index[j]] + curves[h][j];
                lw += ln_normal_pdf(data[(i, j)], mean, s2);
            }
            lw
        })
        .collect()
}

/// Unnormalized log `P(s_i = h | ·)` for every `h`.
pub fn cluster_label_log_weights(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, i: usize) -> Vec<f64> {
    label_log_weights_with(state, data, design, &atom_curves(state, design), i)
}

pub fn cluster_label_conditional(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, i: usize) -> Result<Vec<f64>> {
    softmax(&cluster_label_log_weights(state, data, design, i))
}

pub fn update_cluster_labels(state: &mut DdpState, data: &DMatrix<f64>, design: &RegressionDesign, rng: &mut SeededRng) -> Result<()> {
    let curves = atom_curves(state, design);
    for i in 0..data.nrows() {
        let lw = label_log_weights_with(state, data, design, &curves, i);
        state.labels[i] = draw_categorical_log(&lw, rng)
            .map_err(|e| Error::Numerical(format!("protein {i}: {e}; log-weights {lw:?}")))?;
    }
    Ok(())
}

pub fn update_sticks(state: &mut DdpState, config: &DdpConfig, rng: &mut SeededRng) -> Result<()> {
    let counts = occupancy(&state.labels, config.h);
    state.pi = update_stick_weights(&counts, config.xi, rng)?;
    Ok(())
}

/// Gaussian full conditional of `β̃_h` given everything else, as
/// `(mean, precision)`.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianConditional {
    pub fn ln_pdf_unnormalized(&self, x: &[f64]) -> f64 {
        let d = DVector::from_column_slice(x) - &self.mean;
        -0.5 * (d.transpose() * &self.precision * &d)[(0, 0)]
    }
}

fn members_of(labels: &[usize], h: usize) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &s)| s == h).map(|(i, _)| i).collect()
}

/// `Σ̃_h = (Σ₀⁻¹ + X̃'Σ_h⁻¹X̃)⁻¹`, `μ̃_h = Σ̃_h{X̃'Σ_h⁻¹(ỹ_h − α̃_h − δ̃_h) + Σ₀⁻¹β₀}`.
pub fn beta_conditional(
    state: &DdpState,
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
    h: usize,
) -> Result<GaussianConditional> {
    let xtx = design.design.x.transpose() * &design.design.x;
    beta_conditional_with(state, data, design, config, h, &xtx, state.sigma2[h])
}

fn beta_conditional_with(
    state: &DdpState,
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
    h: usize,
    xtx: &DMatrix<f64>,
    sigma2: f64,
) -> Result<GaussianConditional> {
    let x = &design.design.x;
    let members = members_of(&state.labels, h);
    let prior_prec = config.prior_precision();
    let mut precision = xtx * (members.len() as f64 / sigma2);
    for c in 0..NUM_COVARIATES {
        precision[(c, c)] += prior_prec;
    }
    let mut resid = DVector::<f64>::zeros(data.ncols());
    for &i in &members {
        for j in 0..data.ncols() {
            resid[j] += data[(i, j)] - state.alpha[i] - state.delta[design.time_index[j]];
        }
    }
    let rhs = x.transpose() * resid / sigma2 + DVector::from_column_slice(&config.beta0) * prior_prec;
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("posterior precision of atom {h} is not positive definite")))?;
    let mean = chol.solve(&rhs);
    Ok(GaussianConditional { mean, precision })
}

/// Shape and rate of the inverse-gamma full conditional of `σ̃²_h`.
pub fn sigma2_conditional(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, config: &DdpConfig, h: usize) -> (f64, f64) {
    let x = &design.design.x;
    let curve: Vec<f64> = (0..x.nrows())
        .map(|j| (0..NUM_COVARIATES).map(|c| x[(j, c)] * state.beta[h][c]).sum())
        .collect();
    let mut n = 0usize;
    let mut ss = 0.0;
    for i in members_of(&state.labels, h) {
        for j in 0..data.ncols() {
            let m = state.alpha[i] + curve[j] + state.delta[design.time_index[j]];
            ss += (data[(i, j)] - m).powi(2);
            n += 1;
        }
    }
    (config.a0 + 0.5 * n as f64, config.b0 + 0.5 * ss)
}

fn draw_gaussian(cond: &GaussianConditional, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let chol = cond
        .precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("precision matrix is not positive definite".into()))?;
    let z = DVector::from_fn(cond.mean.len(), |_, _| draw_standard_normal(rng));
    // P = L L' so L'^{-1} z has covariance P^{-1}
    let lt = chol.l().transpose();
    let offset = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    Ok((&cond.mean + offset).iter().copied().collect())
}

/// Conjugate draws of `β̃_h` then `σ̃²_h` for every atom; empty atoms come
/// from the prior.
pub fn update_atoms_regression(
    state: &mut DdpState,
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    let xtx = design.design.x.transpose() * &design.design.x;
    for h in 0..config.h {
        let cond = beta_conditional_with(state, data, design, config, h, &xtx, state.sigma2[h])?;
        state.beta[h] = draw_gaussian(&cond, rng)?;
        let (a, b) = sigma2_conditional(state, data, design, config, h);
        state.sigma2[h] = draw_inverse_gamma(a, b, rng)?;
    }
    Ok(())
}

/// Normal full conditional `(mean, variance)` of `δ_t`.
pub fn delta_conditional(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, config: &DdpConfig, t: usize) -> (f64, f64) {
    let x = &design.design.x;
    let mut precision = 1.0 / config.omega2;
    let mut weighted = config.zeta / config.omega2;
    for j in (0..data.ncols()).filter(|&j| design.time_index[j] == t) {
        for i in 0..data.nrows() {
            let h = state.labels[i];
            let fit: f64 = (0..NUM_COVARIATES).map(|c| x[(j, c)] * state.beta[h][c]).sum();
            precision += 1.0 / state.sigma2[h];
            weighted += (data[(i, j)] - fit - state.alpha[i]) / state.sigma2[h];
        }
    }
    (weighted / precision, 1.0 / precision)
}

pub fn update_time_effects(
    state: &mut DdpState,
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    let curves = atom_curves(state, design);
    let n_times = design.n_times();
    let mut precision = vec![1.0 / config.omega2; n_times];
    let mut weighted = vec![config.zeta / config.omega2; n_times];
    for i in 0..data.nrows() {
        let h = state.labels[i];
        let inv = 1.0 / state.sigma2[h];
        for j in 0..data.ncols() {
            let t = design.time_index[j];
            precision[t] += inv;
            weighted[t] += (data[(i, j)] - curves[h][j] - state.alpha[i]) * inv;
        }
    }
    for t in 0..n_times {
        state.delta[t] = draw_normal(weighted[t] / precision[t], precision[t].recip().sqrt(), rng)?;
    }
    Ok(())
}

/// Normal full conditional `(mean, variance)` of `α_i`.
pub fn alpha_conditional(state: &DdpState, data: &DMatrix<f64>, design: &RegressionDesign, config: &DdpConfig, i: usize) -> (f64, f64) {
    let x = &design.design.x;
    let h = state.labels[i];
    let inv = 1.0 / state.sigma2[h];
    let mut precision = 1.0 / config.sigma02;
    let mut weighted = config.mu0 / config.sigma02;
    for j in 0..data.ncols() {
        let fit: f64 = (0..NUM_COVARIATES).map(|c| x[(j, c)] * state.beta[h][c]).sum();
        precision += inv;
        weighted += (data[(i, j)] - fit - state.delta[design.time_index[j]]) * inv;
    }
    (weighted / precision, 1.0 / precision)
}

pub fn update_protein_offsets(
    state: &mut DdpState,
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    let curves = atom_curves(state, design);
    for i in 0..data.nrows() {
        let h = state.labels[i];
        let inv = 1.0 / state.sigma2[h];
        let mut precision = 1.0 / config.sigma02;
        let mut weighted = config.mu0 / config.sigma02;
        for j in 0..data.ncols() {
            precision += inv;
            weighted += (data[(i, j)] - curves[h][j] - state.delta[design.time_index[j]]) * inv;
        }
        state.alpha[i] = draw_normal(weighted / precision, precision.recip().sqrt(), rng)?;
    }
    Ok(())
}

/// Slope difference `γ_i = (x_{j_{1T},7:12} − x_{j_{11},7:12})·β̃_{s_i,7:12}`.
pub fn gamma(state: &DdpState, design: &RegressionDesign) -> Result<Vec<f64>> {
    let contrast = design.slope_contrast()?;
    let per_atom: Vec<f64> = state
        .beta
        .iter()
        .map(|b| contrast.iter().zip(&b[NUM_BASIS..]).map(|(c, v)| c * v).sum())
        .collect();
    Ok(state.labels.iter().map(|&h| per_atom[h]).collect())
}

/// One sweep of the blocked Gibbs sampler. Labels are held fixed when
/// `freeze_labels` is set.
pub fn sweep(
    state: &mut DdpState,
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
    freeze_labels: bool,
    rng: &mut SeededRng,
) -> Result<()> {
    if !freeze_labels {
        update_cluster_labels(state, data, design, rng)?;
    }
    update_sticks(state, config, rng)?;
    update_atoms_regression(state, data, design, config, rng)?;
    update_time_effects(state, data, design, config, rng)?;
    update_protein_offsets(state, data, design, config, rng)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpChain {
    pub draws: Vec<DdpState>,
    pub log_joint: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Per-draw `γ`, present when the design has both patient corners.
    pub gamma: Option<Vec<Vec<f64>>>,
}

/// Starting point: prior draws for sticks and atoms, protein offsets at the
/// row means, time offsets at `ζ`, labels from the prior weights.
pub fn initial_state(data: &DMatrix<f64>, design: &RegressionDesign, config: &DdpConfig, rng: &mut SeededRng) -> Result<DdpState> {
    let mut state = DdpState::from_prior(config, data.nrows(), design.n_times(), rng)?;
    for i in 0..data.nrows() {
        state.alpha[i] = data.row(i).mean();
    }
    state.delta.iter_mut().for_each(|d| *d = config.zeta);
    Ok(state)
}

pub fn run_chain(
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
    settings: &ChainSettings,
    frozen_labels: Option<&[usize]>,
    rng: &mut SeededRng,
) -> Result<DdpChain> {
    config.validate()?;
    settings.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("empty data matrix".into()));
    }
    if data.ncols() != design.n_subjects() {
        return Err(Error::Validation(format!(
            "data has {} subjects, design has {}",
            data.ncols(),
            design.n_subjects()
        )));
    }
    if let Some(y) = data.iter().find(|y| !y.is_finite()) {
        return Err(Error::Validation(format!("non-finite data value {y}")));
    }
    let mut state = initial_state(data, design, config, rng)?;
    if let Some(labels) = frozen_labels {
        if labels.len() != data.nrows() || labels.iter().any(|&h| h >= config.h) {
            return Err(Error::Validation(format!(
                "frozen labels must be {} values in 0..{}",
                data.nrows(),
                config.h
            )));
        }
        state.labels = labels.to_vec();
    }
    let track_gamma = design.corners.patient_pair().is_ok();
    let n = settings.n_retained();
    let mut chain = DdpChain {
        draws: Vec::with_capacity(n),
        log_joint: Vec::with_capacity(n),
        iterations: Vec::with_capacity(n),
        gamma: track_gamma.then(|| Vec::with_capacity(n)),
    };
    for it in 0..settings.iters {
        sweep(&mut state, data, design, config, frozen_labels.is_some(), rng).map_err(|e| e.at_iteration(it))?;
        if settings.is_retained(it) {
            let lp = log_joint_unchecked(&state, data, design, config);
            if !lp.is_finite() {
                return Err(Error::Numerical(format!("log joint is {lp}")).at_iteration(it));
            }
            if let Some(g) = chain.gamma.as_mut() {
                g.push(gamma(&state, design)?);
            }
            chain.draws.push(state.clone());
            chain.log_joint.push(lp);
            chain.iterations.push(it);
        }
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::TimeScale;

    fn small_design() -> RegressionDesign {
        RegressionDesign::new(&[1.0, 1.0, 2.0, 2.0, 3.0, 3.0], &[0, 1, 0, 1, 0, 1], TimeScale::Index, None).unwrap()
    }

    fn small_config(h: usize) -> DdpConfig {
        DdpConfig {
            h,
            ..DdpConfig::default()
        }
    }

    #[test]
    fn default_hyperparameters() {
        let c = DdpConfig::default();
        assert_eq!((c.h, c.xi, c.sigma_beta0, c.a0, c.b0), (25, 1.0, 1.0, 1.0, 1.0));
        assert_eq!((c.zeta, c.omega2, c.mu0, c.sigma02), (0.0, 0.01, 3.0, 5.0));
        assert_eq!(c.beta0, vec![0.0; 12]);
    }

    #[test]
    fn single_atom_forces_label() {
        let design = small_design();
        let cfg = small_config(1);
        let data = DMatrix::from_fn(3, 6, |i, j| (i + j) as f64);
        let mut rng = SeededRng::new(1, 0);
        let mut st = DdpState::from_prior(&cfg, 3, design.n_times(), &mut rng).unwrap();
        update_cluster_labels(&mut st, &data, &design, &mut rng).unwrap();
        assert_eq!(st.labels, vec![0, 0, 0]);
    }

    #[test]
    fn identical_atoms_give_prior_label_conditional() {
        let design = small_design();
        let cfg = small_config(2);
        let data = DMatrix::from_fn(1, 6, |_, j| j as f64 * 0.4);
        let mut rng = SeededRng::new(2, 0);
        let mut st = DdpState::from_prior(&cfg, 1, design.n_times(), &mut rng).unwrap();
        st.beta[1] = st.beta[0].clone();
        st.sigma2[1] = st.sigma2[0];
        let p = cluster_label_conditional(&st, &data, &design, 0).unwrap();
        assert!((p[0] - st.pi.weights[0]).abs() < 1e-12);
    }

    #[test]
    fn empty_atom_conditional_is_prior() {
        let design = small_design();
        let cfg = small_config(3);
        let data = DMatrix::from_fn(2, 6, |i, j| (i * j) as f64);
        let mut rng = SeededRng::new(3, 0);
        let mut st = DdpState::from_prior(&cfg, 2, design.n_times(), &mut rng).unwrap();
        st.labels = vec![0, 0];
        let cond = beta_conditional(&st, &data, &design, &cfg, 2).unwrap();
        assert!(cond.mean.iter().all(|v| v.abs() < 1e-14));
        assert!((cond.precision.clone() - DMatrix::identity(12, 12)).abs().max() < 1e-14);
        assert_eq!(sigma2_conditional(&st, &data, &design, &cfg, 2), (cfg.a0, cfg.b0));
    }

    #[test]
    fn flat_prior_limit_is_least_squares() {
        // one cluster, vague coefficient prior: mean solves the normal equations
        let ages: Vec<f64> = (0..10).flat_map(|t| [t as f64; 2]).collect();
        let conds: Vec<u8> = (0..10).flat_map(|_| [0u8, 1]).collect();
        let design = RegressionDesign::new(&ages, &conds, TimeScale::Index, None).unwrap();
        let cfg = DdpConfig {
            h: 1,
            sigma_beta0: 1e3,
            ..DdpConfig::default()
        };
        let mut rng = SeededRng::new(4, 0);
        let data = DMatrix::from_fn(3, 20, |i, j| (i as f64) + (j as f64 * 0.37).sin() + 0.1 * j as f64);
        let st = DdpState::from_prior(&cfg, 3, design.n_times(), &mut rng).unwrap();
        let cond = beta_conditional(&st, &data, &design, &cfg, 0).unwrap();
        let x = &design.design.x;
        let mut r = DVector::zeros(20);
        for i in 0..3 {
            for j in 0..20 {
                r[j] += (data[(i, j)] - st.alpha[i] - st.delta[design.time_index[j]]) / 3.0;
            }
        }
        let xtx = x.transpose() * x;
        let ols = xtx.cholesky().unwrap().solve(&(x.transpose() * r));
        assert!((cond.mean - ols).abs().max() < 1e-3);
    }

    #[test]
    fn flat_prior_limits_for_offsets() {
        let design = small_design();
        let mut rng = SeededRng::new(5, 0);
        let data = DMatrix::from_fn(1, 6, |_, j| 2.0 + j as f64);
        let cfg = DdpConfig {
            h: 2,
            omega2: 1e12,
            sigma02: 1e12,
            ..DdpConfig::default()
        };
        let st = DdpState::from_prior(&cfg, 1, design.n_times(), &mut rng).unwrap();
        let x = &design.design.x;
        let fit = |j: usize| (0..12).map(|c| x[(j, c)] * st.beta[st.labels[0]][c]).sum::<f64>();
        let (m, _) = alpha_conditional(&st, &data, &design, &cfg, 0);
        let avg = (0..6).map(|j| data[(0, j)] - fit(j) - st.delta[design.time_index[j]]).sum::<f64>() / 6.0;
        assert!((m - avg).abs() < 1e-6);
        // single protein at time 0 holds subjects 0 and 1
        let (m, _) = delta_conditional(&st, &data, &design, &cfg, 0);
        let avg = (0..2).map(|j| data[(0, j)] - fit(j) - st.alpha[0]).sum::<f64>() / 2.0;
        assert!((m - avg).abs() < 1e-6);
    }

    #[test]
    fn offsets_without_data_follow_prior() {
        let design = RegressionDesign::new(&[1.0, 2.0], &[0, 0], TimeScale::Continuous, Some([1.3, 1.6])).unwrap();
        let cfg = small_config(2);
        let mut rng = SeededRng::new(6, 0);
        let data = DMatrix::<f64>::zeros(0, 2);
        let st = DdpState::from_prior(&cfg, 0, 2, &mut rng).unwrap();
        assert_eq!(delta_conditional(&st, &data, &design, &cfg, 0), (cfg.zeta, cfg.omega2));
        let empty = DMatrix::<f64>::zeros(1, 0);
        let no_subjects = RegressionDesign {
            design: crate::spline::DesignMatrix {
                x: DMatrix::zeros(0, 12),
                times: vec![],
                conditions: vec![],
            },
            ..design
        };
        let st = DdpState::from_prior(&cfg, 1, 2, &mut rng).unwrap();
        let (m, v) = alpha_conditional(&st, &empty, &no_subjects, &cfg, 0);
        assert!((m - cfg.mu0).abs() < 1e-12 && (v - cfg.sigma02).abs() < 1e-12);
    }

    #[test]
    fn gamma_is_cluster_deterministic() {
        let design = small_design();
        let cfg = small_config(3);
        let mut rng = SeededRng::new(7, 0);
        let mut st = DdpState::from_prior(&cfg, 3, design.n_times(), &mut rng).unwrap();
        st.labels = vec![1, 2, 1];
        let g = gamma(&st, &design).unwrap();
        assert_eq!(g[0], g[2]);
        // clamped ends: γ = β_12 − β_7
        assert!((g[1] - (st.beta[2][11] - st.beta[2][6])).abs() < 1e-12);
        st.beta[1][6..].iter_mut().for_each(|b| *b = 0.0);
        assert_eq!(gamma(&st, &design).unwrap()[0], 0.0);
    }

    #[test]
    fn gamma_needs_patient_corners() {
        let design = RegressionDesign::new(&[1.0, 2.0, 3.0], &[0, 0, 0], TimeScale::Index, None).unwrap();
        let cfg = small_config(2);
        let st = DdpState::from_prior(&cfg, 1, 3, &mut SeededRng::new(1, 0)).unwrap();
        assert!(matches!(gamma(&st, &design), Err(Error::Validation(_))));
    }

    #[test]
    fn chain_is_deterministic() {
        let design = small_design();
        let cfg = small_config(4);
        let data = DMatrix::from_fn(5, 6, |i, j| 3.0 + (i % 2) as f64 * j as f64 * 0.5);
        let settings = ChainSettings::new(40, 10, 3).unwrap();
        let a = run_chain(&data, &design, &cfg, &settings, None, &mut SeededRng::new(9, 0)).unwrap();
        let b = run_chain(&data, &design, &cfg, &settings, None, &mut SeededRng::new(9, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gamma.as_ref().unwrap().len(), settings.n_retained());
        for d in &a.draws {
            assert!((d.pi.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.sigma2.iter().all(|&s| s > 0.0));
            assert_eq!(occupancy(&d.labels, cfg.h).iter().sum::<usize>(), 5);
        }
    }

    #[test]
    fn reorder_preserves_fit() {
        let design = small_design();
        let cfg = small_config(4);
        let st = DdpState::from_prior(&cfg, 5, design.n_times(), &mut SeededRng::new(2, 0)).unwrap();
        let re = st.reorder_atoms_by_norm();
        assert_eq!(gamma(&st, &design).unwrap(), gamma(&re, &design).unwrap());
        let norms: Vec<f64> = re.beta.iter().map(|b| b.iter().map(|v| v * v).sum()).collect();
        assert!(norms.windows(2).all(|w| w[0] >= w[1]));
    }
}
