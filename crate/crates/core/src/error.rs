use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: expected {expected}, got {actual}")]
    ShapeMismatch {
        node: String,
        expected: String,
        actual: String,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("spatial mismatch in channel concat: inputs have extents {extents}")]
    SpatialMismatch { extents: String },

    #[error("degenerate output extent at {node}: {detail}")]
    DegenerateOutput { node: String, detail: String },

    #[error("unbound graph input `{0}`")]
    UnboundInput(String),

    #[error("backward called before a forward pass was recorded")]
    BackwardBeforeForward,

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("batch norm needs at least 2 values per channel in training mode, got {0}")]
    InsufficientStatistics(usize),

    #[error("bilinear upsample only enlarges: {from_h}x{from_w} -> {to_h}x{to_w}")]
    DownscaleRequest {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },

    #[error("scale mismatch: source `{source_id}` at 1/{source_scale} cannot reach target 1/{target_scale}")]
    ScaleMismatch {
        source_id: String,
        source_scale: usize,
        target_scale: usize,
    },

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("malformed netpbm header: {0}")]
    MalformedHeader(String),

    #[error("truncated netpbm body: expected {expected} bytes, found {found}")]
    TruncatedBody { expected: usize, found: usize },

    #[error("unsupported netpbm maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),

    #[error("pad target {target_h}x{target_w} is smaller than {h}x{w}")]
    ShrinkRequest {
        h: usize,
        w: usize,
        target_h: usize,
        target_w: usize,
    },

    #[error("malformed tensor blob: {0}")]
    MalformedTensor(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("training diverged at iteration {iter}: loss = {loss}")]
    Diverged { iter: usize, loss: f64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Validation { .. } | Error::Config { .. })
    }
}
