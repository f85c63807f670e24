use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("malformed sequence at token {index}: {reason}")]
    MalformedSequence { index: usize, reason: String },

    #[error("invalid octree: {0}")]
    InvalidTree(String),

    #[error("invalid compression scheme: {0}")]
    Scheme(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence too long: {latents} latents exceed {max} positions")]
    TooLong { latents: usize, max: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by malformed input data (as opposed to runtime failures).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::MalformedSequence { .. }
                | Error::InvalidTree(_)
                | Error::Scheme(_)
                | Error::Shape(_)
                | Error::Checkpoint(_)
                | Error::InvalidArgument(_)
                | Error::EmptyDataset(_)
                | Error::Csv(_)
                | Error::Config(_)
        )
    }
}
