use std::path::PathBuf;

/// Errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value was rejected before any work started.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A layer index was outside the range a backend reports.
    #[error("layer {layer} out of range: backend `{backend}` exposes layers 0..{layer_count}")]
    LayerOutOfRange {
        backend: String,
        layer: usize,
        layer_count: usize,
    },

    /// Two tensors or images that must agree in shape did not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A backend was asked for pixel gradients it cannot provide.
    #[error("backend `{0}` does not support pixel gradients")]
    GradientsUnsupported(String),

    /// A backend name was not found in the registry.
    #[error("unknown backend `{name}`; registered backends: {}", known.join(", "))]
    UnknownBackend { name: String, known: Vec<String> },

    /// A config, catalogue, or manifest file failed to parse.
    #[error("parse error in {path}{}: {message}", location.as_ref().map(|l| format!(" ({l})")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        location: Option<String>,
        message: String,
    },

    /// The optimiser produced a non-finite loss; the run was aborted.
    #[error("non-finite loss at step {step} for concept `{concept}` layer {layer}")]
    NonFiniteLoss {
        step: usize,
        concept: String,
        layer: usize,
    },

    /// A remote judge request failed after all retries.
    #[error("judge transport: {0}")]
    Transport(String),

    /// A judge client was asked to do something it does not implement.
    #[error("judge client `{client}` cannot {operation}")]
    JudgeUnsupported { client: String, operation: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    ImageCodec { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
