//! Tokenizer with extraction delimiters and a small decoder-only
//! autoregressive language model: causal hidden states, the vocabulary
//! head, temperature sampling, greedy decoding, and checkpoint I/O.

pub mod checkpoint;
mod decode;
mod model;
pub mod vocab;

pub use decode::{DecoderState, Reduction};
pub use model::{LanguageModel, TapeBinding};
pub use vocab::Vocabulary;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;

/// Architecture hyperparameters. The defaults are the desk-scale
/// configuration; the mechanism rather than the capacity is under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 261,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            context_len: 1024,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(LmError::Parameter(format!(
                "embed_dim {} must be a nonzero multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.context_len < 2 {
            return Err(LmError::Parameter("context_len must be at least 2".into()));
        }
        if self.vocab_size != Vocabulary::new().size() {
            return Err(LmError::Parameter(format!(
                "vocab_size {} does not match the byte-level vocabulary ({})",
                self.vocab_size,
                Vocabulary::new().size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    /// Callers must truncate prefixes; the model never truncates silently.
    #[error("prefix of {len} tokens exceeds context length {max}")]
    ContextLength { len: usize, max: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}
