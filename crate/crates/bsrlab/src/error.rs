//! Crate-wide error type with a stable mapping to CLI exit codes.

use thiserror::Error;

/// Everything that can go wrong across the laboratory.
///
/// Variants are grouped by how the CLI reports them: input/validation problems
/// exit with code 1, numerical failures with code 2, and statistically
/// inconclusive outcomes with code 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed rule document or experiment parameters.
    #[error("validation: {0}")]
    Validation(String),

    /// Rule file could not be parsed into a rule table.
    #[error("rule parse: {0}")]
    RuleParse(String),

    /// File or serialization failure while reading/writing artifacts.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// ODE step produced non-finite or wildly non-conserving state.
    #[error("numerical instability: {0}")]
    Instability(String),

    /// A quantity underflowed below representable range where a positive
    /// value was required.
    #[error("underflow: {0}")]
    Underflow(String),

    /// A quantity overflowed a documented guard bound.
    #[error("overflow guard: {0}")]
    Overflow(String),

    /// Iterative solver failed to converge within its iteration cap.
    #[error("no convergence: {0}")]
    NonConvergence(String),

    /// The solved horizon does not bracket the requested root; the caller
    /// should re-solve on a longer horizon.
    #[error("horizon too short: {0}")]
    HorizonTooShort(String),

    /// A series was zero to the maximum inspected order, so the vanishing
    /// order could not be determined.
    #[error("order undetermined: {0}")]
    OrderUndetermined(String),

    /// A structural guard (problem-size cap) was exceeded.
    #[error("size guard: {0}")]
    SizeGuard(String),

    /// The experiment ran but its statistics are too weak to call.
    #[error("inconclusive: {0}")]
    Inconclusive(String),
}

impl Error {
    /// Exit code the CLI reports for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::RuleParse(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::Instability(_)
            | Error::Underflow(_)
            | Error::Overflow(_)
            | Error::NonConvergence(_)
            | Error::HorizonTooShort(_)
            | Error::OrderUndetermined(_)
            | Error::SizeGuard(_) => 2,
            Error::Inconclusive(_) => 3,
        }
    }
}
