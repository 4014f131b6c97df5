//! Hierarchical visual representation: per-view tokens pooled from patch
//! features by learned queries, a scene token pooled from the view tokens,
//! and the concatenated visual sequence consumed by a small trainable
//! decoder. All numerics are `f64` with hand-written gradients.

pub mod block;
pub mod checkpoint;
pub mod decoder;
pub mod hierarchy;
pub mod model;
pub mod patchify;

pub use block::BlockParams;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use decoder::{DecoderContext, ToyDecoder};
pub use hierarchy::{assemble_hierarchy, encode, encode_backward, scene_token, view_tokens, FeatureHierarchy, HierParams, VIEW_COUNT};
pub use model::{gradient_check, train_toy, ModelConfig, TensorCheck, ToyExample, ToyModel};
pub use patchify::patchify_stub;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HierError {
    #[error("{what}: expected width {expected}, got {got}")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("{heads} heads do not divide model width {dim}")]
    Heads { dim: usize, heads: usize },
    #[error("attention needs at least one key")]
    NoKeys,
    #[error("expected {VIEW_COUNT} views, got {0}")]
    ViewCount(usize),
    #[error("vocabulary size {0} < 2")]
    Vocab(usize),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("answer sequence is empty")]
    EmptyTarget,
    #[error("answer length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("{width}x{height} image is not divisible into a {grid}x{grid} grid")]
    Grid { width: u32, height: u32, grid: usize },
    #[error("no training examples")]
    NoExamples,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
}
