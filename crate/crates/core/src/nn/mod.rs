//! Differentiable compute substrate: dense tensors, a tape with
//! reverse-mode gradients, attention, timestamp encodings and Adam.

mod attention;
mod conv;
mod encoding;
mod gradcheck;
mod graph;
mod layers;
mod ops;
mod optim;
mod params;
mod scalar;
mod suite;
mod tensor;


use thiserror::Error;

pub use attention::AttentionMask;
pub use conv::ConvGeom;
pub use encoding::{sinusoidal_encode, sinusoidal_encode_real, timestamp_table};
pub use gradcheck::{grad_check, grad_check_store, relative_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{Block, Conv2d, ConvTranspose2d, LayerNorm, Linear};
pub use ops::{ResampleMap, UnaryKind};
pub use optim::{AdamConfig, OptimState};
pub use params::{init, Grads, Group, GroupMask, ParamEntry, ParamId, ParamStore};
pub use scalar::Scalar;
pub use suite::{check_all_ops, op_names};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("attention mask row {row} allows no key")]
    AllMaskedRow { row: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
}
