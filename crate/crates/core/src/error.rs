use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by estimation, training and simulation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("singular design: reciprocal condition number {rcond:e} is below the floor {floor:e}")]
    SingularDesign { rcond: f64, floor: f64 },
    #[error("invalid design matrix: {0}")]
    InvalidDesign(&'static str),
    #[error("labeled set is empty")]
    EmptyLabeledSet,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("argument out of domain: {0}")]
    DomainError(&'static str),
    #[error("denominator {value:e} is too close to zero (irrelevant instrument?)")]
    DivisionByNearZero { value: f64 },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("required columns missing: {0}")]
    MissingColumns(String),
    #[error("degenerate adversary design: {0}")]
    DegenerateDesign(&'static str),
    #[error("model parameters contain non-finite values")]
    NonFiniteParams,
    #[error("loss became non-finite at iteration {iteration}; try a smaller primary learning rate")]
    NonFiniteLoss { iteration: usize },
    #[error("requested {requested} labeled rows but only {available} are available")]
    InsufficientLabels { requested: usize, available: usize },
    #[error("pixel bank calibration failed: accuracy {achieved:.4} vs target {target:.4}")]
    CalibrationFailed { achieved: f64, target: f64 },
    #[error("bootstrap replicate {index} failed: {source}")]
    Replicate { index: usize, source: Box<Error> },
}

impl Error {
    /// Short module-qualified identifier, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "regress.dimension_mismatch",
            Error::SingularDesign { .. } => "regress.singular_design",
            Error::InvalidDesign(_) => "regress.invalid_design",
            Error::EmptyLabeledSet => "diagnose.empty_labeled_set",
            Error::IndexOutOfRange { .. } => "diagnose.index_out_of_range",
            Error::DomainError(_) => "diagnose.domain_error",
            Error::DivisionByNearZero { .. } => "regress.division_by_near_zero",
            Error::InvalidSpec(_) => "spec.invalid",
            Error::MissingColumns(_) => "adversary.missing_columns",
            Error::DegenerateDesign(_) => "adversary.degenerate_design",
            Error::NonFiniteParams => "model.non_finite_params",
            Error::NonFiniteLoss { .. } => "train.non_finite_loss",
            Error::InsufficientLabels { .. } => "train.insufficient_labels",
            Error::CalibrationFailed { .. } => "simgen.calibration_failed",
            Error::Replicate { source, .. } => source.code(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularDesign { .. }
            | Error::DivisionByNearZero { .. }
            | Error::DegenerateDesign(_)
            | Error::NonFiniteParams
            | Error::NonFiniteLoss { .. }
            | Error::CalibrationFailed { .. } => true,
            Error::Replicate { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
