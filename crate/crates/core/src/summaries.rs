//! Posterior summaries computed from archived draws: partition point
//! estimates, co-clustering maps, slope-difference estimates, quantile
//! ranking and model-fit diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ddp::{beta_conditional, DdpConfig, DdpState};
use crate::error::{Error, Result};
use crate::nested::NestedState;
use crate::partition::{binder_loss_unchecked, coclustering_matrix, Partition};
use crate::rng::SeededRng;
use crate::spline::{RegressionDesign, NUM_BASIS, NUM_COVARIATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateSource {
    /// One of the sampled partitions.
    Sampled,
    /// Improved on every sampled partition by the greedy search.
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DahlEstimate {
    pub partition: Partition,
    pub loss: f64,
    pub source: EstimateSource,
}

/// Settings of the randomized sequential-allocation search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub restarts: usize,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            restarts: 64,
            max_sweeps: 100,
            seed: 0x5eed,
        }
    }
}

/// Binder-loss point estimate of a partition from posterior draws, with
/// the default search settings.
pub fn dahl_point_estimate<L: AsRef<[usize]>>(draws: &[L]) -> Result<DahlEstimate> {
    dahl_point_estimate_with(draws, &SearchOptions::default())
}

pub fn dahl_point_estimate_with<L: AsRef<[usize]>>(draws: &[L], options: &SearchOptions) -> Result<DahlEstimate> {
    let coclust = coclustering_matrix(draws)?;
    let (best_sampled, sampled_loss) = draws
        .iter()
        .map(|d| {
            let p = Partition::canonical_unchecked(d.as_ref());
            let loss = binder_loss_unchecked(p.labels(), &coclust);
            (p, loss)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("draws checked non-empty");
    let refined = minimize_binder(&coclust, Some(best_sampled.labels()), options);
    let refined_loss = binder_loss_unchecked(refined.labels(), &coclust);
    if refined_loss < sampled_loss - 1e-12 {
        Ok(DahlEstimate {
            partition: refined,
            loss: refined_loss,
            source: EstimateSource::Refined,
        })
    } else {
        Ok(DahlEstimate {
            partition: best_sampled,
            loss: sampled_loss,
            source: EstimateSource::Sampled,
        })
    }
}

/// Local search on `Σ_{same pairs} (1 − 2p_{ii′})`, which differs from the
/// Binder loss by a constant. Random-order sequential allocation followed
/// by single-item reassignment sweeps, restarted `options.restarts` times;
/// `start` is swept as an extra candidate.
pub fn minimize_binder(coclust: &DMatrix<f64>, start: Option<&[usize]>, options: &SearchOptions) -> Partition {
    let n = coclust.nrows();
    if n == 0 {
        return Partition::one_cluster(0);
    }
    let cost = DMatrix::from_fn(n, n, |i, j| 1.0 - 2.0 * coclust[(i, j)]);
    let mut rng = SeededRng::new(options.seed, 0);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let consider = |labels: Vec<usize>, best: &mut Option<(Vec<usize>, f64)>| {
        let loss = binder_loss_unchecked(&labels, coclust);
        if best.as_ref().is_none_or(|(_, b)| loss < *b - 1e-12) {
            *best = Some((labels, loss));
        }
    };
    if let Some(s) = start {
        let mut labels = Partition::canonical_unchecked(s).labels().to_vec();
        sweeten(&cost, &mut labels, options.max_sweeps);
        consider(labels, &mut best);
    }
    for _ in 0..options.restarts.max(1) {
        let mut order: Vec<usize> = (0..n).collect();
        for a in (1..n).rev() {
            let b = (rng.uniform() * (a + 1) as f64) as usize;
            order.swap(a, b.min(a));
        }
        let mut labels = sequential_allocation(&cost, &order);
        sweeten(&cost, &mut labels, options.max_sweeps);
        consider(labels, &mut best);
    }
    Partition::canonical_unchecked(&best.expect("at least one candidate").0)
}

fn sequential_allocation(cost: &DMatrix<f64>, order: &[usize]) -> Vec<usize> {
    let n = cost.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut n_clusters = 0;
    for (step, &i) in order.iter().enumerate() {
        let mut scores = vec![0.0; n_clusters + 1];
        for &other in &order[..step] {
            scores[labels[other]] += cost[(i, other)];
        }
        let best = argmin(&scores);
        labels[i] = best;
        if best == n_clusters {
            n_clusters += 1;
        }
    }
    labels
}

fn sweeten(cost: &DMatrix<f64>, labels: &mut [usize], max_sweeps: usize) {
    let n = labels.len();
    for _ in 0..max_sweeps {
        let mut changed = false;
        for i in 0..n {
            let n_labels = labels.iter().copied().max().unwrap_or(0) + 1;
            // slot n_labels stands for a fresh singleton
            let mut scores = vec![0.0; n_labels + 1];
            for other in (0..n).filter(|&o| o != i) {
                scores[labels[other]] += cost[(i, other)];
            }
            let current = labels[i];
            let best = argmin(&scores);
            let alone = labels.iter().enumerate().all(|(o, &l)| o == i || l != current);
            if scores[best] < scores[current] - 1e-12 && !(alone && best == n_labels) {
                labels[i] = best;
                changed = true;
            }
        }
        let canon = Partition::canonical_unchecked(labels);
        labels.copy_from_slice(canon.labels());
        if !changed {
            break;
        }
    }
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in xs.iter().enumerate() {
        if v < xs[best] {
            best = k;
        }
    }
    best
}

/// Mode of the occupied-cluster counts; ties go to the smaller count.
pub fn map_cluster_count<I: IntoIterator<Item = usize>>(counts: I) -> Result<usize> {
    let mut tally = std::collections::BTreeMap::new();
    for k in counts {
        *tally.entry(k).or_insert(0usize) += 1;
    }
    let max = *tally.values().max().ok_or_else(|| Error::Validation("no draws".into()))?;
    Ok(*tally.iter().find(|(_, &c)| c == max).unwrap().0)
}

/// Raw sampler label of each point-estimate cluster in `labels`, if the
/// draw's partition matches `point` exactly.
fn aligned_labels(labels: &[usize], point: &Partition) -> Option<Vec<usize>> {
    if Partition::canonical_unchecked(labels) != *point {
        return None;
    }
    Some(point.blocks().iter().map(|b| labels[b[0]]).collect())
}

/// Row co-clustering probabilities `p^k_{ii′} = P(M_ik = M_i′k | y, S)`,
/// one matrix per cluster of the subject point estimate. Only draws whose
/// subject partition equals `point` contribute.
pub fn nested_coclustering(draws: &[NestedState], point: &Partition) -> Result<Vec<DMatrix<f64>>> {
    let mut per_cluster: Vec<Vec<&[usize]>> = vec![Vec::new(); point.n_clusters()];
    for d in draws {
        if d.partition.subject_labels.len() != point.len() {
            return Err(Error::Validation("point estimate and draws cover different subjects".into()));
        }
        if let Some(raw) = aligned_labels(&d.partition.subject_labels, point) {
            for (c, &k) in raw.iter().enumerate() {
                per_cluster[c].push(&d.partition.row_labels[k]);
            }
        }
    }
    if per_cluster.first().is_none_or(|v| v.is_empty()) {
        return Err(Error::Validation(
            "no draws match the subject point estimate; re-run the chain with subjects frozen at the estimate".into(),
        ));
    }
    per_cluster.iter().map(|rows| coclustering_matrix(rows)).collect()
}

/// Rao-Blackwellized slope difference: average over draws of the contrast
/// applied to the conditional mean of the cluster coefficients given all
/// non-coefficient parameters.
pub fn rao_blackwell_gamma(
    draws: &[DdpState],
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    config: &DdpConfig,
) -> Result<Vec<f64>> {
    if draws.is_empty() {
        return Err(Error::Validation("no draws".into()));
    }
    let contrast = design.slope_contrast()?;
    let mut total = vec![0.0; data.nrows()];
    for d in draws {
        d.validate(data, design, config)?;
        let mut per_atom = vec![None; config.h];
        for (i, &h) in d.labels.iter().enumerate() {
            if per_atom[h].is_none() {
                let cond = beta_conditional(d, data, design, config, h)?;
                let g: f64 = (0..NUM_BASIS).map(|m| contrast[m] * cond.mean[NUM_BASIS + m]).sum();
                per_atom[h] = Some(g);
            }
            total[i] += per_atom[h].unwrap();
        }
    }
    let m = draws.len() as f64;
    Ok(total.into_iter().map(|t| t / m).collect())
}

/// Plain Monte Carlo mean of `γ` draws.
pub fn mean_gamma(gamma_draws: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = gamma_draws.first().ok_or_else(|| Error::Validation("no draws".into()))?;
    let mut mean = vec![0.0; first.len()];
    for g in gamma_draws {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    let n = gamma_draws.len() as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub c: f64,
    /// `P(P_i > c | y)`.
    pub exceed_prob: Vec<f64>,
    /// Optimal ranks `R*_i`, 1-based, a permutation of `1..=I`.
    pub r_star: Vec<usize>,
    /// Items reported in the top set, by decreasing `R*`.
    pub selected: Vec<usize>,
}

/// Size of the reported top set, `⌈(1 − c)(I + 1)⌉` capped at `I`.
pub fn top_set_size(c: f64, n_items: usize) -> usize {
    let raw = (1.0 - c) * (n_items as f64 + 1.0);
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n_items)
}

/// Quantile ranking under 0-1 loss for the top `(1 − c)` fraction.
///
/// Per draw, `R_i = #{i′ : |γ_i| ≥ |γ_i′|}` and `P_i = R_i/(I+1)`. Then
/// `R*_i` is the ascending rank of `P(P_i > c | y)`, ties going to the
/// lower index.
pub fn rank_quantile(gamma_draws: &[Vec<f64>], c: f64) -> Result<RankReport> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::Validation(format!("quantile level c = {c} outside (0,1)")));
    }
    let first = gamma_draws.first().ok_or_else(|| Error::Validation("no γ draws".into()))?;
    let n = first.len();
    let threshold = c * (n as f64 + 1.0);
    let mut exceed = vec![0usize; n];
    let mut abs = vec![0.0; n];
    for (m, g) in gamma_draws.iter().enumerate() {
        if g.len() != n {
            return Err(Error::Validation(format!("draw {m} has {} items, expected {n}", g.len())));
        }
        for (a, v) in abs.iter_mut().zip(g) {
            *a = v.abs();
        }
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        for i in 0..n {
            // number of entries ≤ |γ_i|
            let rank = sorted.partition_point(|&v| v <= abs[i]);
            if rank as f64 > threshold {
                exceed[i] += 1;
            }
        }
    }
    let m = gamma_draws.len() as f64;
    let exceed_prob: Vec<f64> = exceed.iter().map(|&e| e as f64 / m).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| exceed_prob[a].total_cmp(&exceed_prob[b]).then(a.cmp(&b)));
    let mut r_star = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        r_star[i] = r + 1;
    }
    let top = top_set_size(c, n);
    let selected = order.iter().rev().take(top).copied().collect();
    Ok(RankReport {
        c,
        exceed_prob,
        r_star,
        selected,
    })
}

impl RankReport {
    /// The `n` items with the largest `R*`.
    pub fn top(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.r_star.len()).collect();
        order.sort_by(|&a, &b| self.r_star[b].cmp(&self.r_star[a]));
        order.truncate(n);
        order
    }
}

/// Corner-difference baseline
/// `[(y_{i,j1T} − y_{i,j11}) − (y_{i,j0T} − y_{i,j01})]/(T − 1)`.
pub fn naive_gamma_hat(data: &DMatrix<f64>, design: &RegressionDesign) -> Result<Vec<f64>> {
    let (c1, ct, p1, pt) = design.corners.all()?;
    let t = design.n_times();
    if t < 2 {
        return Err(Error::Validation("need at least two time points".into()));
    }
    let scale = (t - 1) as f64;
    Ok((0..data.nrows())
        .map(|i| ((data[(i, pt)] - data[(i, p1)]) - (data[(i, ct)] - data[(i, c1)])) / scale)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Coefficient of determination of the posterior fitted curves, per
    /// cluster of the point partition.
    pub r2_per_cluster: Vec<f64>,
    /// One residual `y_ij − ŷ^{(m)}_ij` per draw at a random cell.
    pub residual_sample: Vec<f64>,
    /// The same residuals divided by the draw's cluster sd.
    pub standardized_residuals: Vec<f64>,
}

impl FitDiagnostics {
    pub fn mean_r2(&self) -> f64 {
        self.r2_per_cluster.iter().sum::<f64>() / self.r2_per_cluster.len().max(1) as f64
    }
}

fn fitted(x: &DMatrix<f64>, j: usize, beta: &[f64]) -> f64 {
    (0..NUM_COVARIATES).map(|c| x[(j, c)] * beta[c]).sum()
}

/// Residual diagnostic and per-cluster R².
///
/// Residuals: for every draw pick one cell `(i, j)` uniformly and record
/// `y_ij − (α_i + δ_{t_j} + x_j'β̃_{s_i})` under that draw's parameters.
/// R²: fitted values `α*_h + δ̄_t + x_j'β̄_h` from posterior means over the
/// draws whose partition equals `point`, with `α*_h` the cluster average of
/// `ᾱ_i`.
pub fn fit_diagnostics(
    draws: &[DdpState],
    data: &DMatrix<f64>,
    design: &RegressionDesign,
    point: &Partition,
    rng: &mut SeededRng,
) -> Result<FitDiagnostics> {
    if draws.is_empty() {
        return Err(Error::Validation("no draws".into()));
    }
    if point.len() != data.nrows() {
        return Err(Error::Validation("point partition does not cover every protein".into()));
    }
    let x = &design.design.x;
    let (n_i, n_j) = (data.nrows(), data.ncols());
    let mut residual_sample = Vec::with_capacity(draws.len());
    let mut standardized = Vec::with_capacity(draws.len());
    for d in draws {
        let i = ((rng.uniform() * n_i as f64) as usize).min(n_i - 1);
        let j = ((rng.uniform() * n_j as f64) as usize).min(n_j - 1);
        let h = d.labels[i];
        let yhat = d.alpha[i] + d.delta[design.time_index[j]] + fitted(x, j, &d.beta[h]);
        let r = data[(i, j)] - yhat;
        residual_sample.push(r);
        standardized.push(r / d.sigma2[h].sqrt());
    }

    let k = point.n_clusters();
    let mut beta_bar = vec![DVector::<f64>::zeros(NUM_COVARIATES); k];
    let mut delta_bar = vec![0.0; design.n_times()];
    let mut alpha_bar = vec![0.0; n_i];
    let mut used = 0usize;
    for d in draws {
        let Some(raw) = aligned_labels(&d.labels, point) else {
            continue;
        };
        used += 1;
        for (c, &h) in raw.iter().enumerate() {
            beta_bar[c] += DVector::from_column_slice(&d.beta[h]);
        }
        for (acc, v) in delta_bar.iter_mut().zip(&d.delta) {
            *acc += v;
        }
        for (acc, v) in alpha_bar.iter_mut().zip(&d.alpha) {
            *acc += v;
        }
    }
    if used == 0 {
        return Err(Error::Validation(
            "no draws match the point partition; re-run the chain with labels frozen at the estimate".into(),
        ));
    }
    let u = used as f64;
    let r2_per_cluster = point
        .blocks()
        .iter()
        .enumerate()
        .map(|(c, members)| {
            let beta: Vec<f64> = (&beta_bar[c] / u).iter().copied().collect();
            let alpha_star = members.iter().map(|&i| alpha_bar[i] / u).sum::<f64>() / members.len() as f64;
            let ys: Vec<(f64, f64)> = members
                .iter()
                .flat_map(|&i| {
                    let beta = &beta;
                    let delta_bar = &delta_bar;
                    (0..n_j).map(move |j| {
                        let yhat = alpha_star + delta_bar[design.time_index[j]] / u + fitted(x, j, beta);
                        (data[(i, j)], yhat)
                    })
                })
                .collect();
            let mean = ys.iter().map(|(y, _)| y).sum::<f64>() / ys.len() as f64;
            let ss_tot: f64 = ys.iter().map(|(y, _)| (y - mean).powi(2)).sum();
            let ss_res: f64 = ys.iter().map(|(y, f)| (y - f).powi(2)).sum();
            if ss_tot > 0.0 {
                1.0 - ss_res / ss_tot
            } else if ss_res == 0.0 {
                1.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(FitDiagnostics {
        r2_per_cluster,
        residual_sample,
        standardized_residuals: standardized,
    })
}

/// One-sample Kolmogorov–Smirnov test against the standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_standard_normal(sample: &[f64]) -> Result<KsTest> {
    if sample.is_empty() {
        return Err(Error::Validation("empty sample".into()));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let statistic = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    Ok(KsTest {
        statistic,
        p_value: kolmogorov_survival((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * statistic),
    })
}

/// `P(K > x)` for the Kolmogorov distribution.
fn kolmogorov_survival(x: f64) -> f64 {
    if x < 0.27 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `(normal quantile, sorted sample)` pairs for a Q-Q plot.
pub fn qq_points(sample: &[f64]) -> Vec<(f64, f64)> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| (normal.inverse_cdf((i as f64 + 0.5) / n), x))
        .collect()
}
