use std::path::PathBuf;

use shapeedit_numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("could not place object after {tries} attempts")]
    Placement { tries: usize },
    #[error("object {0} not present in scene")]
    MissingReferent(u32),
    #[error("edit is infeasible: {0}")]
    Infeasible(String),
    #[error("unknown task tag `{0}`")]
    UnknownTask(String),
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("record {0} lacks scene metadata")]
    MissingScene(String),
    #[error("response parse error: {0}")]
    Parse(#[from] crate::scoring::ParseError),
    #[error("scorer error: {0}")]
    Scorer(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("empty filtered dataset")]
    EmptyFilteredDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
