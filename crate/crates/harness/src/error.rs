use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] scaleadv::Error),

    #[error("{path}:{line}: {message}")]
    Config { path: PathBuf, line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),

    #[error("remote request failed: {0}")]
    Remote(String),

    #[error("remote endpoint returned HTTP {0}")]
    RemoteStatus(u16),

    #[error("remote response does not match the expected schema: {0}")]
    Schema(String),

    #[error("query accounting mismatch: attack reported {reported}, oracle counted {counted}")]
    Accounting { reported: usize, counted: usize },

    #[error("{failed} grid points failed; first error: {first}")]
    Incomplete { failed: usize, first: String },
}
