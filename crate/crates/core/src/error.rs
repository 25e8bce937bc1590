use std::io;

use thiserror::Error;

/// Errors produced by the face model, fitter, codec and metrics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid slot collision at cell {cell}, anchor {anchor}: faces {first} and {second}")]
    SlotCollision {
        cell: usize,
        anchor: usize,
        first: usize,
        second: usize,
    },

    #[error("could not place face {face} without overlap after {attempts} attempts")]
    Placement { face: usize, attempts: usize },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by bad caller input rather than I/O failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
