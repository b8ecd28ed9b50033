use crate::image::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },

    #[error("invalid scaling ratio {0}: must be >= 1")]
    InvalidRatio(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported bit depth: maxval {0}")]
    UnsupportedDepth(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("magic number mismatch: expected {expected:#010x}, found {found:#010x}")]
    MagicMismatch { expected: u32, found: u32 },

    #[error("sample count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("image side {0} too small (minimum 8)")]
    TooSmall(usize),

    #[error("scaler is not linear: probe residual {residual:e} exceeds tolerance {tolerance:e}")]
    Nonlinear { residual: f64, tolerance: f64 },

    #[error("empty window")]
    EmptyWindow,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("label {label} out of range for {class_count} classes")]
    InvalidLabel { label: usize, class_count: usize },

    #[error("degenerate noise: gradient vanished after {0} retries")]
    DegenerateNoise(usize),

    #[error("no adversarial initialization found within {0} queries")]
    NoAdversarialInit(u64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("query budget exhausted")]
    BudgetExhausted,
}
