use thiserror::Error;

/// Errors produced anywhere in the harmonization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("resolution {height}x{width} is unsupported: {reason}")]
    Resolution {
        height: usize,
        width: usize,
        reason: String,
    },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("function under gradient check is not deterministic")]
    NonDeterministic,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dataset item `{id}`: {reason}")]
    Data { id: String, reason: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("comparison graph is disconnected; components: {components:?}")]
    DisconnectedGraph { components: Vec<Vec<String>> },

    #[error("item `{0}` never wins; enable pseudo-count smoothing to fit it")]
    ZeroWins(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn require_nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected NCHW input, got {shape:?}"))),
    }
}
