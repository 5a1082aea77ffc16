use thiserror::Error;

/// Errors surfaced by path construction, flow integration and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("times must be strictly increasing and start at 0 (violation at index {0})")]
    NonMonotoneTimes(usize),

    #[error("path must start at the origin (|value[0]| = {0:e})")]
    FirstValueNonzero(f64),

    #[error("query time {t} outside path domain [0, {horizon}]")]
    QueryOutOfRange { t: f64, horizon: f64 },

    #[error("grids do not match: {0}")]
    GridMismatch(String),

    #[error("Hölder exponents do not match: {0} vs {1}")]
    AlphaMismatch(f64, f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("integration step underflow: {0}")]
    StepUnderflow(String),

    #[error("likelihood exponent overflowed the double range (I = {0}); h is not acting bounded")]
    ExpOverflow(f64),

    #[error("flow Jacobian is singular beyond tolerance at t = {0}")]
    SingularJacobian(f64),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("operation requires Z = 0 but the model has a nonzero Z column")]
    ZNotZero,

    #[error("test function exceeded its declared bound: |f| = {observed} > {bound}")]
    BoundViolation { observed: f64, bound: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
