use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("point lies outside the local state space: {0}")]
    OffDomain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("action not admissible: {0}")]
    Inadmissible(String),
    #[error("empty action set: {0}")]
    EmptyActionSet(String),
    #[error(
        "measure outside ambiguity ball at {node}: distance {distance} exceeds radius {radius}"
    )]
    NotInBall {
        node: String,
        distance: f64,
        radius: f64,
    },
    #[error("linear program failed: {0}")]
    Solver(String),
    #[error("problem too large for exhaustive enumeration: {0}")]
    SizeGuard(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine readable tag, used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidMeasure(_) => "invalid_measure",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::OffDomain(_) => "off_domain",
            Error::InvalidInput(_) => "invalid_input",
            Error::Unsupported(_) => "unsupported",
            Error::Inadmissible(_) => "inadmissible",
            Error::EmptyActionSet(_) => "empty_action_set",
            Error::NotInBall { .. } => "not_in_ball",
            Error::Solver(_) => "solver",
            Error::SizeGuard(_) => "size_guard",
            Error::Parse { .. } => "parse",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
