//! File formats, I/O and the command-line pipeline around [`cospa_core`]:
//! scene simulation, training, streaming enhancement, evaluation and
//! beampattern export.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod model;
pub mod wav;

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{}: sample rate {found} Hz, expected {expected} Hz", path.display())]
    SampleRate { path: PathBuf, expected: u32, found: u32 },
    #[error("input has {found} channels but the model expects M = {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing required setting: {0}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] cospa_core::Error),
}

impl Error {
    pub(crate) fn wav(path: &Path, source: hound::Error) -> Self {
        Error::Wav {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
