//! Common-atoms mixture with nested partitions for a data matrix.
//!
//! Rows (e.g. OTUs) are indexed by `i`, columns (subjects) by `j`. Columns
//! are clustered by `S_j ∈ 0..K`. Inside every column cluster `k` each row
//! carries its own label `M_{ik} ∈ 0..L`, so all columns of one cluster
//! share the same partition of rows. Cell `(i, j)` is normal with the atom
//! `(μ_ℓ, σ²_ℓ)`, `ℓ = M_{i,S_j}`; atoms are common to all clusters.
//!
//! Joint density (truncated at `K`, `L`):
//!
//! ```text
//! Π_ij N(y_ij; μ_ℓ, σ²_ℓ) · Π_j π_{S_j} · Π_k Π_i w_{k,M_ik}
//!   · p(π) · Π_k p(w_k) · Π_ℓ NIG(μ_ℓ, σ²_ℓ)
//! ```
//!
//! with `π ~ GEM(β)` and `w_k ~ GEM(α)` as finite stick-breaking priors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::ChainSettings;
use crate::partition::{occupancy, NestedPartitionState};
use crate::rng::{draw_categorical, draw_categorical_log, ln_normal_pdf, softmax, NormalInvGammaParams, SeededRng};
use crate::sticks::{update_stick_weights, StickWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedModelConfig {
    /// Column truncation.
    pub k: usize,
    /// Row truncation.
    pub l: usize,
    /// GEM mass of the row weights `w_k`.
    pub alpha: f64,
    /// GEM mass of the column weights `π`.
    pub beta: f64,
    pub atom_prior: NormalInvGammaParams,
}

impl NestedModelConfig {
    pub fn new(k: usize, l: usize, alpha: f64, beta: f64, atom_prior: NormalInvGammaParams) -> Result<Self> {
        let c = NestedModelConfig {
            k,
            l,
            alpha,
            beta,
            atom_prior,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 {
            return Err(Error::Validation("truncations K and L must be positive".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        self.atom_prior.validate()
    }

    /// Defaults with an empirical-Bayes base measure: `m0` at the grand
    /// mean, `b0` at the sample variance, `κ0 = 0.1`, `a0 = 2`.
    pub fn empirical(data: &DMatrix<f64>) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::Validation("need at least two cells for empirical defaults".into()));
        }
        let mean = data.iter().sum::<f64>() / n as f64;
        let var = data.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let var = if var > 0.0 { var } else { 1.0 };
        NestedModelConfig::new(20, 30, 1.0, 1.0, NormalInvGammaParams::new(mean, 0.1, 2.0, var)?)
    }
}

/// Full latent state `(S, M, π, w, μ, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedState {
    pub partition: NestedPartitionState,
    pub pi: StickWeights,
    /// One stick-breaking vector per column cluster.
    pub w: Vec<StickWeights>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl NestedState {
    /// Draw every latent quantity from the prior.
    pub fn from_prior(config: &NestedModelConfig, n_rows: usize, n_cols: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let pi = StickWeights::prior(config.k, config.beta, rng)?;
        let w = (0..config.k)
            .map(|_| StickWeights::prior(config.l, config.alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        let subject_labels = (0..n_cols)
            .map(|_| draw_categorical(&pi.weights, rng))
            .collect::<Result<Vec<_>>>()?;
        let row_labels = w
            .iter()
            .map(|wk| (0..n_rows).map(|_| draw_categorical(&wk.weights, rng)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut mu = Vec::with_capacity(config.l);
        let mut sigma2 = Vec::with_capacity(config.l);
        for _ in 0..config.l {
            let (m, s) = config.atom_prior.draw(rng)?;
            mu.push(m);
            sigma2.push(s);
        }
        Ok(NestedState {
            partition: NestedPartitionState::new(subject_labels, row_labels, config.k, config.l)?,
            pi,
            w,
            mu,
            sigma2,
        })
    }

    pub fn validate(&self, data: &DMatrix<f64>, config: &NestedModelConfig) -> Result<()> {
        let p = &self.partition;
        p.validate()?;
        if p.k != config.k || p.l != config.l {
            return Err(Error::Validation("state truncations differ from config".into()));
        }
        if p.n_rows() != data.nrows() || p.n_cols() != data.ncols() {
            return Err(Error::Validation(format!(
                "state is {}x{} but data is {}x{}",
                p.n_rows(),
                p.n_cols(),
                data.nrows(),
                data.ncols()
            )));
        }
        if self.pi.len() != config.k || self.w.len() != config.k || self.w.iter().any(|w| w.len() != config.l) {
            return Err(Error::Validation("weight dimensions differ from truncations".into()));
        }
        if self.mu.len() != config.l || self.sigma2.len() != config.l {
            return Err(Error::Validation("atom dimensions differ from L".into()));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("atom variances must be positive".into()));
        }
        Ok(())
    }

    pub fn n_occupied_subject_clusters(&self) -> usize {
        self.partition.subject_partition().n_clusters()
    }
}

/// Log joint density of data and state.
pub fn log_joint(state: &NestedState, data: &DMatrix<f64>, config: &NestedModelConfig) -> Result<f64> {
    state.validate(data, config)?;
    Ok(log_joint_unchecked(state, data, config))
}

pub(crate) fn log_joint_unchecked(state: &NestedState, data: &DMatrix<f64>, config: &NestedModelConfig) -> f64 {
    let p = &state.partition;
    let mut lp = 0.0;
    for j in 0..data.ncols() {
        let k = p.subject_labels[j];
        for i in 0..data.nrows() {
            let l = p.row_labels[k][i];
            lp += ln_normal_pdf(data[(i, j)], state.mu[l], state.sigma2[l]);
        }
        lp += state.pi.weights[k].ln();
    }
    for (k, rows) in p.row_labels.iter().enumerate() {
        for &l in rows {
            lp += state.w[k].weights[l].ln();
        }
    }
    lp += state.pi.ln_prior(config.beta);
    lp += state.w.iter().map(|w| w.ln_prior(config.alpha)).sum::<f64>();
    lp += state
        .mu
        .iter()
        .zip(&state.sigma2)
        .map(|(&m, &s)| config.atom_prior.ln_pdf(m, s))
        .sum::<f64>();
    lp
}

/// Unnormalized log conditional of `S_j = k` for every `k`:
/// `ln π_k + Σ_i ln N(y_ij; μ_{M_ik}, σ²_{M_ik})`.
pub fn subject_label_log_weights(state: &NestedState, data: &DMatrix<f64>, j: usize) -> Vec<f64> {
    let l_count = state.mu.len();
    let cell: Vec<Vec<f64>> = (0..data.nrows())
        .map(|i| {
            (0..l_count)
                .map(|l| ln_normal_pdf(data[(i, j)], state.mu[l], state.sigma2[l]))
                .collect()
        })
        .collect();
    state
        .partition
        .row_labels
        .iter()
        .zip(&state.pi.weights)
        .map(|(rows, &pk)| pk.ln() + rows.iter().enumerate().map(|(i, &l)| cell[i][l]).sum::<f64>())
        .collect()
}

/// Unnormalized log conditional of `M_ik = ℓ` for every `ℓ`:
/// `ln w_{kℓ} + Σ_{j: S_j = k} ln N(y_ij; μ_ℓ, σ²_ℓ)`. Empty column
/// clusters reduce to `ln w_k`.
pub fn row_label_log_weights(state: &NestedState, data: &DMatrix<f64>, k: usize, i: usize) -> Vec<f64> {
    let members: Vec<usize> = (0..data.ncols())
        .filter(|&j| state.partition.subject_labels[j] == k)
        .collect();
    (0..state.mu.len())
        .map(|l| {
            state.w[k].weights[l].ln()
                + members
                    .iter()
                    .map(|&j| ln_normal_pdf(data[(i, j)], state.mu[l], state.sigma2[l]))
                    .sum::<f64>()
        })
        .collect()
}

fn draw_or_report(log_weights: &[f64], what: impl FnOnce() -> String, rng: &mut SeededRng) -> Result<usize> {
    draw_categorical_log(log_weights, rng)
        .map_err(|e| Error::Numerical(format!("{}: {e}; log-weights {log_weights:?}", what())))
}

pub fn update_subject_labels(state: &mut NestedState, data: &DMatrix<f64>, rng: &mut SeededRng) -> Result<()> {
    for j in 0..data.ncols() {
        let lw = subject_label_log_weights(state, data, j);
        state.partition.subject_labels[j] = draw_or_report(&lw, || format!("subject {j}"), rng)?;
    }
    Ok(())
}

pub fn update_row_labels(state: &mut NestedState, data: &DMatrix<f64>, rng: &mut SeededRng) -> Result<()> {
    for k in 0..state.partition.k {
        for i in 0..data.nrows() {
            let lw = row_label_log_weights(state, data, k, i);
            state.partition.row_labels[k][i] = draw_or_report(&lw, || format!("row {i} in column cluster {k}"), rng)?;
        }
    }
    Ok(())
}

/// Stick updates for `π` (counts from `S`) and each `w_k` (counts from `M_{·k}`).
pub fn update_weights(state: &mut NestedState, config: &NestedModelConfig, rng: &mut SeededRng) -> Result<()> {
    let counts = occupancy(&state.partition.subject_labels, config.k);
    state.pi = update_stick_weights(&counts, config.beta, rng)?;
    for k in 0..config.k {
        let counts = occupancy(&state.partition.row_labels[k], config.l);
        state.w[k] = update_stick_weights(&counts, config.alpha, rng)?;
    }
    Ok(())
}

/// NIG posterior of atom `ℓ` from all cells currently allocated to it.
pub fn atom_posterior(state: &NestedState, data: &DMatrix<f64>, config: &NestedModelConfig, l: usize) -> NormalInvGammaParams {
    let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
    for j in 0..data.ncols() {
        for i in 0..data.nrows() {
            if state.partition.cell_label(i, j) == l {
                let y = data[(i, j)];
                n += 1;
                s1 += y;
                s2 += y * y;
            }
        }
    }
    config.atom_prior.posterior(n, s1, s2)
}

pub fn update_atoms(state: &mut NestedState, data: &DMatrix<f64>, config: &NestedModelConfig, rng: &mut SeededRng) -> Result<()> {
    let l_count = config.l;
    let mut n = vec![0usize; l_count];
    let mut s1 = vec![0.0; l_count];
    let mut s2 = vec![0.0; l_count];
    for j in 0..data.ncols() {
        let rows = &state.partition.row_labels[state.partition.subject_labels[j]];
        for (i, &l) in rows.iter().enumerate() {
            let y = data[(i, j)];
            n[l] += 1;
            s1[l] += y;
            s2[l] += y * y;
        }
    }
    for l in 0..l_count {
        let post = config.atom_prior.posterior(n[l], s1[l], s2[l]);
        let (m, s) = post.draw(rng)?;
        state.mu[l] = m;
        state.sigma2[l] = s;
    }
    Ok(())
}

/// One Gibbs sweep: S, M, π, w, atoms. `S` is held fixed when
/// `freeze_subjects` is set.
pub fn sweep(
    state: &mut NestedState,
    data: &DMatrix<f64>,
    config: &NestedModelConfig,
    freeze_subjects: bool,
    rng: &mut SeededRng,
) -> Result<()> {
    if !freeze_subjects {
        update_subject_labels(state, data, rng)?;
    }
    update_row_labels(state, data, rng)?;
    update_weights(state, config, rng)?;
    update_atoms(state, data, config, rng)?;
    Ok(())
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedChain {
    pub draws: Vec<NestedState>,
    /// Log joint at each retained draw.
    pub log_joint: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// Run a Gibbs chain from a prior draw. With `frozen_subjects`, `S` is set
/// to those labels and never updated (conditional re-run given a point
/// estimate of the column partition).
pub fn run_chain(
    data: &DMatrix<f64>,
    config: &NestedModelConfig,
    settings: &ChainSettings,
    frozen_subjects: Option<&[usize]>,
    rng: &mut SeededRng,
) -> Result<NestedChain> {
    config.validate()?;
    settings.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("empty data matrix".into()));
    }
    if let Some(y) = data.iter().find(|y| !y.is_finite()) {
        return Err(Error::Validation(format!("non-finite data value {y}")));
    }
    let mut state = NestedState::from_prior(config, data.nrows(), data.ncols(), rng)?;
    if let Some(labels) = frozen_subjects {
        if labels.len() != data.ncols() || labels.iter().any(|&k| k >= config.k) {
            return Err(Error::Validation(format!(
                "frozen subject labels must be {} values in 0..{}",
                data.ncols(),
                config.k
            )));
        }
        state.partition.subject_labels = labels.to_vec();
    }
    let mut chain = NestedChain {
        draws: Vec::with_capacity(settings.n_retained()),
        log_joint: Vec::with_capacity(settings.n_retained()),
        iterations: Vec::with_capacity(settings.n_retained()),
    };
    for it in 0..settings.iters {
        sweep(&mut state, data, config, frozen_subjects.is_some(), rng).map_err(|e| e.at_iteration(it))?;
        debug_assert!(state.partition.shares_row_partitions());
        if settings.is_retained(it) {
            let lp = log_joint_unchecked(&state, data, config);
            if !lp.is_finite() {
                return Err(Error::Numerical(format!("log joint is {lp}")).at_iteration(it));
            }
            chain.draws.push(state.clone());
            chain.log_joint.push(lp);
            chain.iterations.push(it);
        }
    }
    Ok(chain)
}

/// Normalized conditional pmf of `S_j`.
pub fn subject_label_conditional(state: &NestedState, data: &DMatrix<f64>, j: usize) -> Result<Vec<f64>> {
    softmax(&subject_label_log_weights(state, data, j))
}

/// Normalized conditional pmf of `M_ik`.
pub fn row_label_conditional(state: &NestedState, data: &DMatrix<f64>, k: usize, i: usize) -> Result<Vec<f64>> {
    softmax(&row_label_log_weights(state, data, k, i))
}
