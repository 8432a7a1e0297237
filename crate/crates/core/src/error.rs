use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate steering vector (a^H R^-1 a = {0:e})")]
    DegenerateSteering(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("placement failed after {0} attempts")]
    Placement(usize),
    #[error("silent source: {0}")]
    SilentSource(&'static str),
    #[error("no decay span in energy decay curve")]
    NoDecay,
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("NaN loss on scene {scene}")]
    NanLoss { scene: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl core::fmt::Debug, found: impl core::fmt::Debug) -> Error {
    Error::Shape {
        op,
        expected: alloc::format!("{expected:?}"),
        found: alloc::format!("{found:?}"),
    }
}
