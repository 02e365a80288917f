//! Byte-level tokenizer, decoder-only transformer, autoregressive sampler,
//! and the bit-exact checkpoint format shared by the policy, reference, and
//! reward models.
//!
//! Three forward paths exist — the autodiff graph, the no-grad batch pass,
//! and the incremental cached decoder — and all of them call the same
//! kernels in the same order, so equal weights give bit-equal logits on
//! every path.

mod checkpoint;
mod model;
mod sample;
mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ParamMeta, Stage, MAGIC};
pub use model::{KvCache, ModelConfig, TransformerParams, LN_EPS};
pub use sample::{sample, SampleOutput, SamplerConfig};
pub use tokenizer::{Tokenizer, Token, BOS, EOS, PAD, SEP, VOCAB_SIZE};

use crate::numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sequence length {len} exceeds context {ctx}")]
    ContextOverflow { len: usize, ctx: usize },
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LmError>;
