//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad grid, incompatible shapes, unknown preset, ...
    #[error("configuration error: {0}")]
    Config(String),

    /// A field picked up a NaN or infinity during iteration.
    #[error("divergence detected in `{component}` at iteration {iteration}")]
    Divergence {
        component: &'static str,
        iteration: usize,
    },

    /// A resource budget was exceeded (e.g. kernel quadrature chunk too large).
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// Invariant violation that should never happen for valid inputs.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
