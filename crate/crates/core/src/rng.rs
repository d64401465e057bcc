//! Seeded random streams and the handful of distributions the samplers use.
//!
//! Every sampler draws through [`SeededRng`], a ChaCha8 generator keyed by a
//! user seed plus a stream id, so each chain of a multi-chain run gets its
//! own reproducible, non-overlapping stream from a single `--seed`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Counter-based generator identified by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent generator for a sub-task, derived deterministically from
    /// this generator's seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed, stream)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Normal-Inverse-Gamma base measure: `sigma2 ~ InvGa(a0, b0)`,
/// `mu | sigma2 ~ N(m0, sigma2 / kappa0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalInvGammaParams {
    pub m0: f64,
    pub kappa0: f64,
    pub a0: f64,
    pub b0: f64,
}

impl NormalInvGammaParams {
    pub fn new(m0: f64, kappa0: f64, a0: f64, b0: f64) -> Result<Self> {
        let p = NormalInvGammaParams { m0, kappa0, a0, b0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.m0.is_finite() {
            return Err(Error::Parameter(format!("m0 must be finite, got {}", self.m0)));
        }
        for (name, v) in [("kappa0", self.kappa0), ("a0", self.a0), ("b0", self.b0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Conjugate update from the sufficient statistics of `n` observations.
    pub fn posterior(&self, n: usize, sum: f64, sum_sq: f64) -> NormalInvGammaParams {
        if n == 0 {
            return *self;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let ss = (sum_sq - nf * mean * mean).max(0.0);
        let kappa_n = self.kappa0 + nf;
        let m_n = (self.kappa0 * self.m0 + sum) / kappa_n;
        let a_n = self.a0 + 0.5 * nf;
        let dev = mean - self.m0;
        let b_n = self.b0 + 0.5 * ss + 0.5 * self.kappa0 * nf * dev * dev / kappa_n;
        NormalInvGammaParams {
            m0: m_n,
            kappa0: kappa_n,
            a0: a_n,
            b0: b_n,
        }
    }

    /// Draw `(mu, sigma2)`.
    pub fn draw(&self, rng: &mut SeededRng) -> Result<(f64, f64)> {
        let sigma2 = draw_inverse_gamma(self.a0, self.b0, rng)?;
        let mu = draw_normal(self.m0, (sigma2 / self.kappa0).sqrt(), rng)?;
        Ok((mu, sigma2))
    }

    pub fn ln_pdf(&self, mu: f64, sigma2: f64) -> f64 {
        ln_inv_gamma_pdf(sigma2, self.a0, self.b0) + ln_normal_pdf(mu, self.m0, sigma2 / self.kappa0)
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be finite, got {v}")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn draw_normal(mean: f64, sd: f64, rng: &mut SeededRng) -> Result<f64> {
    check_finite("mean", mean)?;
    check_positive("sd", sd)?;
    let d = Normal::new(mean, sd).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(d.sample(rng))
}

pub fn draw_standard_normal(rng: &mut SeededRng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn draw_beta(a: f64, b: f64, rng: &mut SeededRng) -> Result<f64> {
    check_positive("beta shape a", a)?;
    check_positive("beta shape b", b)?;
    let d = Beta::new(a, b).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Gamma with shape `a` and rate `b`.
pub fn draw_gamma(a: f64, b: f64, rng: &mut SeededRng) -> Result<f64> {
    check_positive("gamma shape", a)?;
    check_positive("gamma rate", b)?;
    let d = Gamma::new(a, 1.0 / b).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Inverse-gamma with density proportional to `x^-(a+1) exp(-b/x)`.
pub fn draw_inverse_gamma(a: f64, b: f64, rng: &mut SeededRng) -> Result<f64> {
    check_positive("inverse-gamma shape", a)?;
    check_positive("inverse-gamma rate", b)?;
    loop {
        let g = draw_gamma(a, b, rng)?;
        // a gamma draw can underflow to zero for tiny shapes
        if g > 0.0 {
            return Ok(1.0 / g);
        }
    }
}

/// Index drawn with probability proportional to `weights`.
pub fn draw_categorical(weights: &[f64], rng: &mut SeededRng) -> Result<usize> {
    let mut total = 0.0;
    for (h, &w) in weights.iter().enumerate() {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Parameter(format!("weight {h} is {w}")));
        }
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::Parameter("all categorical weights are zero".into()));
    }
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (h, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = h;
            acc += w;
            if u < acc {
                return Ok(h);
            }
        }
    }
    Ok(last_positive)
}

/// Categorical draw from unnormalized log-weights; `-inf` entries have zero
/// mass. The maximum is subtracted before exponentiating.
pub fn draw_categorical_log(log_weights: &[f64], rng: &mut SeededRng) -> Result<usize> {
    let probs = softmax(log_weights)?;
    draw_categorical(&probs, rng)
}

/// Normalized probabilities from log-weights.
pub fn softmax(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::Parameter("log-weights contain NaN or +inf".into()));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Parameter("all log-weights are -inf".into()));
    }
    let mut out: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

pub fn ln_inv_gamma_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

pub fn ln_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return f64::NEG_INFINITY;
    }
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    // keep 0 * ln(0) = 0 at the boundary for unit shapes
    let t1 = if a == 1.0 { 0.0 } else { (a - 1.0) * x.ln() };
    let t2 = if b == 1.0 { 0.0 } else { (b - 1.0) * (1.0 - x).ln() };
    t1 + t2 - ln_b
}
