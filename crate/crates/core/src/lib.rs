//! Separately exchangeable nonparametric Bayesian models.
//!
//! Two samplers share one toolbox: a common-atoms mixture with nested
//! partitions for data matrices ([`nested`]) and an ANOVA DDP mixture of
//! spline regressions ([`ddp`]). Posterior summaries, synthetic data
//! generators and Monte Carlo checks of the exchangeability inequalities
//! sit alongside.

pub mod cli;
pub mod ddp;
pub mod error;
pub mod exch;
pub mod io;
pub mod mcmc;
pub mod nested;
pub mod partition;
pub mod rng;
pub mod simdata;
pub mod spline;
pub mod sticks;
pub mod summaries;

pub use error::{Error, Result};
pub use partition::Partition;
pub use rng::SeededRng;
