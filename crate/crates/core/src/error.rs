use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    /// A row whose norm is below the normalization floor.
    #[error("{op}: degenerate vector at row {row}")]
    DegenerateVector { op: &'static str, row: usize },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("no prototype for class {class}")]
    MissingPrototype { class: usize },

    #[error("anchor {anchor} has no {kind} in batch scope")]
    MissingPair { anchor: usize, kind: &'static str },

    #[error("invalid probability distribution at row {row}")]
    InvalidDistribution { row: usize },

    /// The structural-regularization terms need a classifier head on the old model.
    #[error("structural regularization unavailable: old model has no classifier head")]
    StructuralRegUnavailable,

    /// A compatibility method cannot run against the given models.
    #[error("method {method} inapplicable: {reason}")]
    Inapplicable { method: String, reason: String },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
