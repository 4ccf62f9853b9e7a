use alloc::string::String;

/// Failure modes shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A softmax row with every position masked.
    #[error("degenerate row in {op}: every position is masked")]
    DegenerateRow { op: &'static str },
    /// A pooling group with no valid member.
    #[error("degenerate subgraph in {op}: no unmasked rows")]
    DegenerateSubgraph { op: &'static str },
    /// NaN or infinity produced by a forward operation.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// Caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Bad user-supplied data.
    #[error("input error: {0}")]
    Input(String),
    /// Invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// An iterative method ran out of iterations.
    #[error("numeric error: {detail} (residual {residual:e})")]
    Numeric { detail: String, residual: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
