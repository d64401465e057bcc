use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A distribution was asked to sample with invalid parameters.
    #[error("invalid distribution parameter: {0}")]
    Parameter(String),

    /// Input data, configuration or state failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Evaluation point outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A sampler step produced a degenerate or non-finite quantity.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A chain failed at a given iteration.
    #[error("chain failed at iteration {iteration}: {source}")]
    Chain {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Chain {
            iteration,
            source: Box::new(self),
        }
    }
}
