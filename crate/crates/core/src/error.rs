use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data for {what}: need at least {needed}, got {got}")]
    InsufficientData {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("degenerate {0}")]
    Degenerate(String),

    #[error("{what} did not converge after {iterations} iterations: {detail}")]
    NoConvergence {
        what: String,
        iterations: usize,
        detail: String,
    },

    #[error("constraints incompatible: {0}")]
    ConstraintsIncompatible(String),

    #[error("unbounded tail (xi = {xi})")]
    UnboundedTail { xi: f64 },

    #[error("shape xi = {xi} is within the Gumbel-ambiguous band")]
    GumbelAmbiguous { xi: f64 },

    #[error("state {z} outside the open support ({lower}, {upper})")]
    OutsideSupport { z: f64, lower: f64, upper: f64 },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_)
                | Error::NoConvergence { .. }
                | Error::ConstraintsIncompatible(_)
                | Error::UnboundedTail { .. }
                | Error::GumbelAmbiguous { .. }
                | Error::OutsideSupport { .. }
        )
    }
}
