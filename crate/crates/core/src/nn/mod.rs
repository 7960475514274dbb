//! Minimal differentiable substrate: parameter blocks, a reverse-mode tape,
//! per-point MLPs with pooling, and AdamW with AMSGrad.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;

use thiserror::Error;

pub use graph::{Graph, Var};
pub(crate) use graph::kernels;
pub use layers::{LayerKind, LayerSpec, Linear, Mlp, DEFAULT_NEGATIVE_SLOPE};
pub use optim::{AdamW, AdamWConfig};
pub use params::{kaiming_uniform, ParamId, ParameterBlock, ParamStore};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("graph not evaluated: {0}")]
    GraphNotEvaluated(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint is missing block {0}")]
    MissingBlock(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
