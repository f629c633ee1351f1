//! The dual-encoder / single-decoder network.
//!
//! One encoder stack serves both inputs: the ID sequence is encoded under a
//! [`VisibleMatrix`], the natural-language sequence under full visibility.
//! The decoder cross-attends to `[NL states ‖ ID states]`.

mod checkpoint;
mod config;
mod mask;
mod network;
mod params;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use mask::{build_visible_matrix, MaskError, Span, SpanLabel, VisibleMatrix};
pub use network::{ControlRec, EncodedStates, EncodedVars, Generation, ParamVars, Visibility};
pub use params::ParamStore;

use thiserror::Error;

use crate::autodiff::TensorError;

pub type Token = u32;

/// Reserved token ids shared by the tokenizer and the network.
pub mod special {
    use super::Token;

    pub const PAD: Token = 0;
    pub const EOS: Token = 1;
    pub const CLS: Token = 2;
    pub const UNK: Token = 3;
    pub const RESERVED: usize = 4;
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: Token, vocab_size: usize },
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("{what} length {len} exceeds the configured maximum {max}")]
    SequenceTooLong { what: &'static str, len: usize, max: usize },
    #[error("visibility matrix covers {mask} positions but the sequence has {len}")]
    MaskLength { mask: usize, len: usize },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
