use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VlpError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{encoder} layer {layer}: {detail}")]
    Shape {
        encoder: String,
        layer: String,
        detail: String,
    },
    #[error("degenerate layer {layer}: every {what} would be removed")]
    DegenerateLayer { layer: String, what: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{stage}: loss became non-finite at step {step}")]
    Divergence { stage: String, step: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unrecognized magic bytes")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: checksum mismatch (truncated or corrupted file)")]
    Checksum { path: PathBuf },
    #[error("{path}: tensor {name} has shape {found:?}, config requires {expected:?}")]
    CheckpointShape {
        path: PathBuf,
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{path}: malformed checkpoint: {detail}")]
    Malformed { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, VlpError>;
