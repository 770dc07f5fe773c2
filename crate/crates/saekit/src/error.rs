//! One error type for the whole kit. The CLI maps these onto exit codes, so
//! variants are grouped by what went wrong (validation, numerics, I/O) rather
//! than by module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("concat: empty tensor list")]
    EmptyConcat,

    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("{op}: channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: degenerate output: {detail}")]
    DegenerateOutput { op: &'static str, detail: String },

    #[error("variables come from different tapes")]
    TapeMismatch,

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite gradient produced by op '{op_kind}'")]
    NonFiniteGrad { op_kind: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("targets must be exactly 0 or 1, found {value} at element {index}")]
    NonBinaryTarget { value: f64, index: usize },

    #[error("batchnorm: training needs at least 2 values per channel, got {0}")]
    SingletonBatch(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),

    #[error("r2 is undefined: true labels have zero variance")]
    ZeroVariance,

    #[error("checkpoint: bad magic")]
    CkptBadMagic,

    #[error("checkpoint: unsupported version {0}")]
    CkptVersion(u32),

    #[error("checkpoint: truncated file")]
    CkptTruncated,

    #[error("checkpoint: duplicate tensor name '{0}'")]
    CkptDuplicate(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numeric kind (divergence, NaN production),
    /// as opposed to bad inputs or I/O trouble.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteGrad { .. }
                | Error::NonFiniteLoss { .. }
                | Error::DivisionByZero { .. }
        )
    }
}
