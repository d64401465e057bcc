//! Monte Carlo checks of the dependence patterns implied by exchangeability
//! assumptions, run against prior samplers of random arrays.
//!
//! Every check compares two quantities estimated from the same draws and
//! decides with a 3-standard-error rule on their paired difference.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ddp::{DdpConfig, DdpState};
use crate::error::{Error, Result};
use crate::nested::{NestedModelConfig, NestedState};
use crate::rng::{draw_categorical, draw_standard_normal, SeededRng};
use crate::simdata::sample_nested_data;
use crate::spline::{RegressionDesign, NUM_COVARIATES};
use crate::sticks::StickWeights;

const N_SE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    fn from_sample(xs: &[f64]) -> Estimate {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Estimate {
            value: mean,
            se: (var / n).sqrt(),
        }
    }

    /// `|value − target| ≤ 3 SE`.
    pub fn covers(&self, target: f64) -> bool {
        (self.value - target).abs() <= N_SE * self.se
    }
}

/// Decision rule applied to `first − second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Difference above `−3 SE`.
    AtLeast,
    /// Difference above `+3 SE`.
    Exceeds,
    /// Difference within `±3 SE`.
    Equal,
}

impl Rule {
    fn holds(self, diff: &Estimate) -> bool {
        let band = N_SE * diff.se;
        match self {
            Rule::AtLeast => diff.value >= -band,
            Rule::Exceeds => diff.value > band,
            Rule::Equal => diff.value.abs() <= band,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub model: String,
    pub n_draws: usize,
    /// Draws entering the estimates (all of them unless conditioning).
    pub n_used: usize,
    pub first_label: String,
    pub first: Estimate,
    pub second_label: String,
    pub second: Estimate,
    pub difference: Estimate,
    pub rule: Rule,
    pub pass: bool,
}

/// Which cell pairs a correlation is averaged over.
#[derive(Clone, Copy)]
enum Pairs {
    /// `(i, j), (i′, j)` with `i ≠ i′`.
    SameColumn,
    /// `(i, j), (i, j′)` with `j ≠ j′`.
    SameRow,
    /// `(i, j), (i′, j′)` with `i ≠ i′`, `j ≠ j′`.
    Disjoint,
}

fn mean_product(z: &DMatrix<f64>, pairs: Pairs) -> f64 {
    let (n_i, n_j) = z.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n_i {
        for j in 0..n_j {
            for i2 in 0..n_i {
                for j2 in 0..n_j {
                    let take = match pairs {
                        Pairs::SameColumn => j == j2 && i != i2,
                        Pairs::SameRow => i == i2 && j != j2,
                        Pairs::Disjoint => i != i2 && j != j2,
                    };
                    if take {
                        sum += z[(i, j)] * z[(i2, j2)];
                        count += 1;
                    }
                }
            }
        }
    }
    sum / count as f64
}

fn draw_arrays<F>(mut sampler: F, n_draws: usize, rng: &mut SeededRng) -> Result<Vec<DMatrix<f64>>>
where
    F: FnMut(&mut SeededRng) -> Result<DMatrix<f64>>,
{
    if n_draws < 2 {
        return Err(Error::Validation("need at least two draws".into()));
    }
    let mut out = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let x = sampler(rng)?;
        if x.nrows() < 2 || x.ncols() < 2 {
            return Err(Error::Validation(format!(
                "sampler must emit at least a 2x2 array, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        out.push(x);
    }
    Ok(out)
}

/// Standardize every cell by the pooled mean and sd over all draws, which
/// is valid because exchangeable arrays share one marginal law.
fn standardize(draws: &mut [DMatrix<f64>]) -> Result<()> {
    let n: usize = draws.iter().map(|d| d.len()).sum();
    let mean = draws.iter().flat_map(|d| d.iter()).sum::<f64>() / n as f64;
    let var = draws.iter().flat_map(|d| d.iter()).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Numerical(format!("array variance is {var}")));
    }
    let sd = var.sqrt();
    for d in draws.iter_mut() {
        d.apply(|x| *x = (*x - mean) / sd);
    }
    Ok(())
}

fn corr_check(
    check: &str,
    model: &str,
    draws: &mut [DMatrix<f64>],
    first: (Pairs, &str),
    second: (Pairs, &str),
    rule: Rule,
) -> Result<CheckReport> {
    standardize(draws)?;
    let a: Vec<f64> = draws.iter().map(|z| mean_product(z, first.0)).collect();
    let b: Vec<f64> = draws.iter().map(|z| mean_product(z, second.0)).collect();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let difference = Estimate::from_sample(&d);
    Ok(CheckReport {
        check: check.into(),
        model: model.into(),
        n_draws: draws.len(),
        n_used: draws.len(),
        first_label: first.1.into(),
        first: Estimate::from_sample(&a),
        second_label: second.1.into(),
        second: Estimate::from_sample(&b),
        pass: rule.holds(&difference),
        difference,
        rule,
    })
}

/// Within-column versus cross-column correlation,
/// `Corr(x_ij, x_i′j)` against `Corr(x_ij, x_i′j′)`.
pub fn check_partial_corr<F>(model: &str, sampler: F, n_draws: usize, rule: Rule, rng: &mut SeededRng) -> Result<CheckReport>
where
    F: FnMut(&mut SeededRng) -> Result<DMatrix<f64>>,
{
    let mut draws = draw_arrays(sampler, n_draws, rng)?;
    corr_check(
        "partial_corr",
        model,
        &mut draws,
        (Pairs::SameColumn, "corr(x_ij, x_i'j)"),
        (Pairs::Disjoint, "corr(x_ij, x_i'j')"),
        rule,
    )
}

/// Same-row versus all-different correlation,
/// `Corr(x_ij, x_ij′)` against `Corr(x_ij, x_i′j′)`.
pub fn check_separate_corr<F>(model: &str, sampler: F, n_draws: usize, rule: Rule, rng: &mut SeededRng) -> Result<CheckReport>
where
    F: FnMut(&mut SeededRng) -> Result<DMatrix<f64>>,
{
    let mut draws = draw_arrays(sampler, n_draws, rng)?;
    corr_check(
        "separate_corr",
        model,
        &mut draws,
        (Pairs::SameRow, "corr(x_ij, x_ij')"),
        (Pairs::Disjoint, "corr(x_ij, x_i'j')"),
        rule,
    )
}

/// Borrowing of co-clustering across columns. Among draws where rows 0 and
/// 1 share a cluster in column 0, compares the frequency of rows (0, 1)
/// sharing a cluster in column 1 with that of rows (0, 2).
///
/// `sampler` returns the row labels of every column, indexed `[j][i]`.
pub fn check_coclustering_borrowing<F>(
    model: &str,
    mut sampler: F,
    n_draws: usize,
    rule: Rule,
    rng: &mut SeededRng,
) -> Result<CheckReport>
where
    F: FnMut(&mut SeededRng) -> Result<Vec<Vec<usize>>>,
{
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..n_draws {
        let cols = sampler(rng)?;
        if cols.len() < 2 || cols.iter().any(|c| c.len() < 3) {
            return Err(Error::Validation("need at least 3 rows and 2 columns".into()));
        }
        if cols[0][0] == cols[0][1] {
            a.push(f64::from(u8::from(cols[1][0] == cols[1][1])));
            b.push(f64::from(u8::from(cols[1][0] == cols[1][2])));
        }
    }
    if a.len() < 2 {
        return Err(Error::Validation(format!(
            "only {} of {n_draws} draws satisfy the conditioning event",
            a.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let difference = Estimate::from_sample(&d);
    Ok(CheckReport {
        check: "coclustering_borrowing".into(),
        model: model.into(),
        n_draws,
        n_used: a.len(),
        first_label: "p(co(1,2) in j' | co(1,2) in j)".into(),
        first: Estimate::from_sample(&a),
        second_label: "p(co(1,3) in j' | co(1,2) in j)".into(),
        second: Estimate::from_sample(&b),
        pass: rule.holds(&difference),
        difference,
        rule,
    })
}

/// Prior-predictive data arrays of the nested model.
pub fn nested_prior_arrays(
    config: NestedModelConfig,
    n_rows: usize,
    n_cols: usize,
) -> impl FnMut(&mut SeededRng) -> Result<DMatrix<f64>> {
    move |rng| {
        let state = NestedState::from_prior(&config, n_rows, n_cols, rng)?;
        sample_nested_data(&state, rng)
    }
}

/// Row labels of each column, `M_{i,S_j}`, under the nested prior.
pub fn nested_prior_row_labels(
    config: NestedModelConfig,
    n_rows: usize,
    n_cols: usize,
) -> impl FnMut(&mut SeededRng) -> Result<Vec<Vec<usize>>> {
    move |rng| {
        let state = NestedState::from_prior(&config, n_rows, n_cols, rng)?;
        let p = &state.partition;
        Ok(p.subject_labels.iter().map(|&k| p.row_labels[k].clone()).collect())
    }
}

/// Partially exchangeable control: one weight vector `w ~ GEM(mass)` and
/// row labels drawn independently in every column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartiallyExchangeableControl {
    pub truncation: usize,
    pub mass: f64,
}

impl PartiallyExchangeableControl {
    pub fn row_labels(self, n_rows: usize, n_cols: usize) -> impl FnMut(&mut SeededRng) -> Result<Vec<Vec<usize>>> {
        move |rng| {
            let w = StickWeights::prior(self.truncation, self.mass, rng)?;
            (0..n_cols)
                .map(|_| (0..n_rows).map(|_| draw_categorical(&w.weights, rng)).collect())
                .collect()
        }
    }
}

/// Noiseless cluster means `θ_it = α_i + δ_t + x_t'β̃_{s_i}` under the
/// ANOVA DDP prior, one column per design row.
pub fn ddp_prior_theta(
    config: DdpConfig,
    design: RegressionDesign,
    n_proteins: usize,
) -> impl FnMut(&mut SeededRng) -> Result<DMatrix<f64>> {
    move |rng| {
        let state = DdpState::from_prior(&config, n_proteins, design.n_times(), rng)?;
        let x = &design.design.x;
        Ok(DMatrix::from_fn(n_proteins, design.n_subjects(), |i, j| {
            let beta = &state.beta[state.labels[i]];
            let fit: f64 = (0..NUM_COVARIATES).map(|c| x[(j, c)] * beta[c]).sum();
            state.alpha[i] + state.delta[design.time_index[j]] + fit
        }))
    }
}

/// Arrays with known correlation structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructedPrior {
    /// All cells i.i.d. standard normal.
    Iid,
    /// `x_ij = m_j + e_ij`, unit variances: within-column correlation 1/2.
    ColumnEffect,
    /// `x_ij = ξ_i + η_j + e_ij`, unit variances: same-row correlation 1/3.
    RowColumnEffect,
}

impl ConstructedPrior {
    pub fn sampler(self, n_rows: usize, n_cols: usize) -> impl FnMut(&mut SeededRng) -> Result<DMatrix<f64>> {
        move |rng| {
            let row: Vec<f64> = (0..n_rows).map(|_| draw_standard_normal(rng)).collect();
            let col: Vec<f64> = (0..n_cols).map(|_| draw_standard_normal(rng)).collect();
            Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| {
                let e = draw_standard_normal(rng);
                match self {
                    ConstructedPrior::Iid => e,
                    ConstructedPrior::ColumnEffect => col[j] + e,
                    ConstructedPrior::RowColumnEffect => row[i] + col[j] + e,
                }
            }))
        }
    }
}
