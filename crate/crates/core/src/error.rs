use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {}x{}, right is {}x{}", .left.0, .left.1, .right.0, .right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("svd did not converge after {sweeps} sweeps (residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("degenerate spectrum: all singular values are zero")]
    DegenerateSpectrum,

    #[error("singular values not sorted descending at index {0}")]
    Unsorted(usize),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("bad magic: expected STC1, found {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated checkpoint: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("training diverged at step {step}: first non-finite tensor is `{tensor}`")]
    Diverged { step: usize, tensor: String },

    #[error("unknown recipe `{recipe}` for method {method}; known recipes: {known}")]
    UnknownRecipe {
        method: String,
        recipe: String,
        known: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
