use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("quadrature did not converge on [{a}, {b}] within depth {depth}")]
    NoConvergence { a: f64, b: f64, depth: u32 },

    #[error("target {target} is outside the bracket [{f_lo}, {f_hi}]")]
    Bracket { target: f64, f_lo: f64, f_hi: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in {0}")]
    NonFinite(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
