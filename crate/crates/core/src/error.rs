//! Crate-wide error type.
//!
//! One enum keeps error plumbing flat across the numeric modules. Variants
//! carry enough context (layer indices, shapes, byte offsets) that a failed
//! run can be diagnosed from the message alone.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A model description that cannot be instantiated.
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    /// A rejected configuration value (negative budget, bad range, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// NaN or infinity showed up where finite numbers are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Importance scoring hit a layer whose weights are all zero.
    #[error("layer {layer} has all-zero weights; magnitude scores are undefined")]
    AllZeroLayer { layer: usize },

    /// Scaled scoring needs a batchnorm directly after the prunable layer.
    #[error("layer {layer} has no batchnorm immediately after it; scale-based scoring needs one")]
    MissingBatchNorm { layer: usize },

    /// A keep rate so low that an entire layer would be masked away.
    #[error("keep rate {rate} would empty layer {layer} ({params} params)")]
    LayerEmptied {
        layer: usize,
        rate: f64,
        params: usize,
    },

    /// Per-layer keep floor incompatible with the global compression target.
    #[error(
        "infeasible pruning: keep floor a_min = {a_min} exceeds the global keep target {target}; \
         lower a_min to at most {target}"
    )]
    InfeasiblePruning { a_min: f64, target: f64 },

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Dataset cannot be partitioned as requested.
    #[error("dataset too small: {0}")]
    DataTooSmall(String),

    /// Malformed binary artifact (checkpoint, IDX file, ...).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
