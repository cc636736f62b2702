use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("degenerate box {0:?}: need x0 < x1 and y0 < y1")]
    Degenerate([u32; 4]),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nn(#[from] pod_nn::NnError),
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write `{path}`: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image `{path}`: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported image format in `{path}`: {message}")]
    UnsupportedImage { path: PathBuf, message: String },
    #[error("invalid JSON in `{path}`: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid page: {0}")]
    InvalidPage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("no training pairs: the corpus has no neighbor edges")]
    NoTrainingPairs,
    #[error("empty training set: no proposal overlaps a ground-truth region")]
    EmptyTrainingSet,
    #[error("layout infeasible: {0}")]
    InfeasibleLayout(String),
    #[error("group score {merged} is below member score {member}")]
    GroupScore { merged: f64, member: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
