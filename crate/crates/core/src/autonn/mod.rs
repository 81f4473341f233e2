//! Minimal dense-tensor autodiff: a reverse-mode tape, the handful of
//! layers the multiview network needs, Adam, checkpoints, and a
//! finite-difference gradient checker.

mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, Coordinates, GradCheckReport};
pub use graph::{softmax_rows, Graph, NodeId};
pub use layers::{he_uniform, multi_head_self_attention, AttentionParams};
pub use params::{AdamConfig, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} outside 0..{classes}")]
    InvalidLabel { label: usize, classes: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
