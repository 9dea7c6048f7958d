use thiserror::Error;

/// Errors produced by kernel construction, oracles and training routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("{size} states exceed the dense-solver guard of {guard}; use Monte-Carlo estimation instead")]
    SizeGuard { size: usize, guard: usize },

    #[error("support recovery failed: thresholding would mask entry ({row},{col}) with true probability {prob:.6e}")]
    SupportRecovery { row: usize, col: usize, prob: f64 },

    #[error("numerical inconsistency: {0}")]
    Numerical(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
