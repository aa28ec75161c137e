// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SndError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("every position of sequence {0} is masked")]
    DegenerateMask(usize),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("duplicate points make the nearest-neighbor distance zero (point {0})")]
    DuplicatePoints(usize),

    #[error("bound undefined: eta * b_x must be positive")]
    UndefinedBound,

    #[error("no denoiser registered for eta = {0}")]
    NoModel(f64),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("single-class labels: {0}")]
    SingleClass(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("protocol: {0}")]
    Protocol(#[from] crate::protocol::FrameError),

    #[error("server error: {0}")]
    Server(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SndError {
    fn from(e: std::io::Error) -> Self {
        SndError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SndError>;
