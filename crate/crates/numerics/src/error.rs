use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("bad tensor file magic")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("tensor file truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
