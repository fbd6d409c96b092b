use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this graph")]
    GraphConsumed,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("symbol {symbol} outside coding range [{min}, {max}] and escape is disabled")]
    SymbolOutOfRange { symbol: i32, min: i32, max: i32 },

    #[error("bitstream truncated")]
    TruncatedStream,

    #[error("bitstream sentinel mismatch (corrupt stream or wrong tables)")]
    SentinelMismatch,

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("no submodel available for {0}")]
    MissingModel(String),

    #[error("zero distance at layer {layer}")]
    ZeroDistance { layer: String },

    #[error("intervention {op} not supported by the {family} family")]
    UnsupportedIntervention { op: &'static str, family: String },

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { what, reason: reason.into() }
    }
}
