//! Handle-driven shape editing with a disentangled signed-distance
//! autoencoder.
//!
//! The crate is layered bottom-up: [`geometry`] (analytic shapes, sampling,
//! metrics, isosurfaces), [`nn`] (tape autodiff and optimizers), [`dataset`]
//! (shape collections on disk), [`canonicalizer`] (consistent handle
//! positions), [`autoencoder`] (the model, losses and training),
//! [`editing`] (interactive sessions), [`segmentation`] and [`evaluation`].

pub mod autoencoder;
pub mod canonicalizer;
pub mod dataset;
pub mod editing;
pub mod evaluation;
pub mod geometry;
pub mod nn;
pub mod segmentation;

use thiserror::Error;

/// Errors raised by the model-level modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset has no canonical handles for shape {0}")]
    MissingHandles(u64),
    #[error("uniform sample positions differ across the batch")]
    UnsharedPositions,
    #[error("unknown session {0}")]
    SessionNotFound(String),
    #[error("no handle edits supplied")]
    NoEdits,
    #[error("eigensolver failed: {0}")]
    EigensolverFailure(String),
    #[error("cannot load checkpoint: {0}")]
    CheckpointLoad(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
