//! Hybrid-attention policy: vocabulary, masks, parameters, forward passes
//! and decoding.

mod actions;
mod decode;
mod layout;
mod params;
mod transformer;
mod vocab;

use thiserror::Error;

use crate::tensor::TensorError;

pub use actions::{ActionChunk, ActionTokenizer};
pub use decode::{
    bind_trainable, decode_actions_autoregressive, decode_actions_parallel, generate_cot, generated_log_softmax,
    logprobs_from_logits, sequence_logprobs, sequence_logprobs_on_tape, DecodedActions, Decoding, GeneratedCot,
    PolicyStep,
};
pub use layout::{build_hybrid_mask, HybridMask, PrefixAttention, Segment, SequenceLayout};
pub use params::{ModelConfig, ParamSet, PolicySnapshot, SnapshotRole};
pub use transformer::{bind_params, forward, forward_on_tape, BlockAttention, BoundParams, KvCache};
pub use vocab::{Special, TokenId, VocabSpec, ACT_QUERY, BOS, THINK_CLOSE, THINK_OPEN};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid sequence layout: {0}")]
    Layout(String),
    #[error("cannot load checkpoint: {0}")]
    Load(String),
    #[error("action value {0} outside [-1, 1]")]
    ActionRange(f64),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
