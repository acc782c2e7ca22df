use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("no foreground pixels above the optical density threshold")]
    EmptyForeground,
    #[error("optical density matrix is rank deficient (sigma2/sigma1 = {ratio:.3e})")]
    DegenerateRank { ratio: f64 },
    #[error("sparse NMF objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },
    #[error("batch size {0} is too small, at least 2 samples are required")]
    BatchTooSmall(usize),
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sample {sample} has {count} variant predictions, at least 2 required")]
    TooFewVariants { sample: usize, count: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
