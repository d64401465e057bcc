//! Clamped cubic B-spline basis with two interior knots and the regression
//! design built on it.
//!
//! Each subject row carries six basis values at its time followed by the
//! same six values multiplied by the subject's condition indicator, so the
//! last six coefficients describe the patient offset curve.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;
pub const NUM_BASIS: usize = 6;
pub const NUM_COVARIATES: usize = 2 * NUM_BASIS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub lower: f64,
    pub upper: f64,
    pub interior_knots: [f64; 2],
}

impl SplineBasis {
    pub fn new(lower: f64, upper: f64, interior_knots: [f64; 2]) -> Result<Self> {
        let [k1, k2] = interior_knots;
        let ok = [lower, upper, k1, k2].iter().all(|v| v.is_finite()) && lower < k1 && k1 < k2 && k2 < upper;
        if !ok {
            return Err(Error::Validation(format!(
                "knots must satisfy lower < k1 < k2 < upper, got [{lower}, {k1}, {k2}, {upper}]"
            )));
        }
        Ok(SplineBasis {
            lower,
            upper,
            interior_knots,
        })
    }

    /// Interior knots at the 1/3 and 2/3 sample quantiles of `values`,
    /// boundary at their range.
    pub fn from_quantiles(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Validation("need at least two time points for a spline basis".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let lower = sorted[0];
        let upper = sorted[sorted.len() - 1];
        SplineBasis::new(lower, upper, [quantile(&sorted, 1.0 / 3.0), quantile(&sorted, 2.0 / 3.0)])
    }

    /// Quantile interior knots inside a fixed boundary.
    pub fn from_quantiles_within(values: &[f64], lower: f64, upper: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Validation("need at least two time points for a spline basis".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        SplineBasis::new(lower, upper, [quantile(&sorted, 1.0 / 3.0), quantile(&sorted, 2.0 / 3.0)])
    }

    /// Clamped knot vector: each boundary repeated `DEGREE + 1` times.
    pub fn knots(&self) -> [f64; 10] {
        let (a, b) = (self.lower, self.upper);
        let [k1, k2] = self.interior_knots;
        [a, a, a, a, k1, k2, b, b, b, b]
    }

    /// Values of the six basis functions at `t`.
    pub fn eval(&self, t: f64) -> Result<[f64; NUM_BASIS]> {
        if !(t >= self.lower && t <= self.upper) {
            return Err(Error::Domain(format!(
                "t = {t} outside [{}, {}]",
                self.lower, self.upper
            )));
        }
        let knots = self.knots();
        // last non-degenerate span is used at the right boundary
        let span = (DEGREE..NUM_BASIS)
            .rev()
            .find(|&s| knots[s] <= t)
            .unwrap_or(DEGREE);

        // triangular Cox–de Boor table over the p + 1 functions alive on the span
        let mut n = [0.0; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut out = [0.0; NUM_BASIS];
        for (r, v) in n.iter().enumerate() {
            out[span - DEGREE + r] = *v;
        }
        Ok(out)
    }
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// J×12 design: basis at `t_j` in columns 1–6, `z_j` times those in 7–12.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub times: Vec<f64>,
    pub conditions: Vec<u8>,
}

impl DesignMatrix {
    pub fn n_subjects(&self) -> usize {
        self.x.nrows()
    }

    pub fn row(&self, j: usize) -> [f64; NUM_COVARIATES] {
        std::array::from_fn(|c| self.x[(j, c)])
    }
}

pub fn build_design(times: &[f64], conditions: &[u8], basis: &SplineBasis) -> Result<DesignMatrix> {
    if times.len() != conditions.len() {
        return Err(Error::Validation(format!(
            "{} times but {} condition indicators",
            times.len(),
            conditions.len()
        )));
    }
    if let Some(z) = conditions.iter().find(|&&z| z > 1) {
        return Err(Error::Validation(format!("condition indicator {z} not in {{0,1}}")));
    }
    let mut x = DMatrix::zeros(times.len(), NUM_COVARIATES);
    for (j, (&t, &z)) in times.iter().zip(conditions).enumerate() {
        let b = basis.eval(t)?;
        for (m, v) in b.iter().enumerate() {
            x[(j, m)] = *v;
            x[(j, NUM_BASIS + m)] = f64::from(z) * v;
        }
    }
    Ok(DesignMatrix {
        x,
        times: times.to_vec(),
        conditions: conditions.to_vec(),
    })
}

/// How raw subject ages enter the spline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeScale {
    /// Ages replaced by their position `1..=T` among the unique ages.
    #[default]
    Index,
    /// Ages used as-is.
    Continuous,
}

/// Subjects at the four corners of the (condition, time) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corners {
    pub control_first: Option<usize>,
    pub control_last: Option<usize>,
    pub patient_first: Option<usize>,
    pub patient_last: Option<usize>,
}

impl Corners {
    /// `(j_{11}, j_{1T})`, needed for the slope contrast.
    pub fn patient_pair(&self) -> Result<(usize, usize)> {
        match (self.patient_first, self.patient_last) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Validation(
                "no patient subjects at both the first and the last time point".into(),
            )),
        }
    }

    /// `(j_{01}, j_{0T}, j_{11}, j_{1T})`.
    pub fn all(&self) -> Result<(usize, usize, usize, usize)> {
        let (p1, pt) = self.patient_pair()?;
        match (self.control_first, self.control_last) {
            (Some(c1), Some(ct)) => Ok((c1, ct, p1, pt)),
            _ => Err(Error::Validation(
                "no control subjects at both the first and the last time point".into(),
            )),
        }
    }
}

fn group_times(ages: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if ages.is_empty() {
        return Err(Error::Validation("design needs at least one subject".into()));
    }
    if let Some(a) = ages.iter().find(|a| !a.is_finite()) {
        return Err(Error::Validation(format!("non-finite age {a}")));
    }
    let mut unique: Vec<f64> = ages.to_vec();
    unique.sort_by(|a, b| a.total_cmp(b));
    unique.dedup();
    let time_index = ages
        .iter()
        .map(|a| unique.binary_search_by(|u| u.total_cmp(a)).expect("age present"))
        .collect();
    Ok((unique, time_index))
}

fn scale_times(ages: &[f64], time_index: &[usize], time_scale: TimeScale) -> Vec<f64> {
    match time_scale {
        TimeScale::Index => time_index.iter().map(|&t| (t + 1) as f64).collect(),
        TimeScale::Continuous => ages.to_vec(),
    }
}

/// Design plus the time grouping used by the per-time offsets.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    pub design: DesignMatrix,
    pub basis: SplineBasis,
    pub time_scale: TimeScale,
    /// Sorted unique raw ages, `τ_1 < … < τ_T`.
    pub unique_times: Vec<f64>,
    /// Index into `unique_times` for each subject.
    pub time_index: Vec<usize>,
    pub corners: Corners,
}

impl RegressionDesign {
    /// Build from raw ages. With `knots = None` the interior knots sit at
    /// the 1/3 and 2/3 quantiles of the (scaled) subject times.
    pub fn new(ages: &[f64], conditions: &[u8], time_scale: TimeScale, knots: Option<[f64; 2]>) -> Result<Self> {
        let (unique, time_index) = group_times(ages)?;
        let scaled = scale_times(ages, &time_index, time_scale);
        let basis = match knots {
            Some(k) => {
                let (lo, hi) = match time_scale {
                    TimeScale::Index => (1.0, unique.len() as f64),
                    TimeScale::Continuous => (unique[0], unique[unique.len() - 1]),
                };
                SplineBasis::new(lo, hi, k)?
            }
            None => SplineBasis::from_quantiles(&scaled)?,
        };
        Self::assemble(ages, conditions, time_scale, basis, unique, time_index)
    }

    /// Build with a caller-supplied basis, whose boundary must cover the
    /// scaled times.
    pub fn with_basis(ages: &[f64], conditions: &[u8], time_scale: TimeScale, basis: SplineBasis) -> Result<Self> {
        let (unique, time_index) = group_times(ages)?;
        Self::assemble(ages, conditions, time_scale, basis, unique, time_index)
    }

    fn assemble(
        ages: &[f64],
        conditions: &[u8],
        time_scale: TimeScale,
        basis: SplineBasis,
        unique: Vec<f64>,
        time_index: Vec<usize>,
    ) -> Result<Self> {
        let scaled = scale_times(ages, &time_index, time_scale);
        let design = build_design(&scaled, conditions, &basis)?;
        let last = unique.len() - 1;
        let find = |z: u8, t: usize| (0..ages.len()).find(|&j| conditions[j] == z && time_index[j] == t);
        let corners = Corners {
            control_first: find(0, 0),
            control_last: find(0, last),
            patient_first: find(1, 0),
            patient_last: find(1, last),
        };
        Ok(RegressionDesign {
            design,
            basis,
            time_scale,
            unique_times: unique,
            time_index,
            corners,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.design.n_subjects()
    }

    pub fn n_times(&self) -> usize {
        self.unique_times.len()
    }

    /// Patient-offset contrast `x_{j_{1T},7:12} − x_{j_{11},7:12}`.
    pub fn slope_contrast(&self) -> Result<[f64; NUM_BASIS]> {
        let (first, last) = self.corners.patient_pair()?;
        let x = &self.design.x;
        Ok(std::array::from_fn(|m| {
            x[(last, NUM_BASIS + m)] - x[(first, NUM_BASIS + m)]
        }))
    }
}
