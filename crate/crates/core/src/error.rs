use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("class budget exceeded: {requested} classes requested, dataset has {available}")]
    ClassBudget { requested: usize, available: usize },
    #[error("zero-norm vector encountered in strict mode")]
    ZeroNorm,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("missing entry: {0}")]
    Missing(String),
    #[error("model has no classifier head")]
    NoClassifier,
    #[error("stopped after task {0}")]
    Interrupted(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
