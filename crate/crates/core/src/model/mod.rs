//! The language model behind all three dialogue stages, its trainer and
//! checkpoint format.

mod checkpoint;
mod gradcheck;
mod params;
mod train;
mod transformer;

use std::path::PathBuf;

use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

pub use checkpoint::{ModelCheckpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, micro_config, TensorCheck};
pub use params::TensorSpec;
pub use train::{
    evaluate_ppl, sequence_targets, train, LogRecord, PplScope, StopReason, TrainOutcome, TrainSchedule,
};
pub use transformer::{softmax_f64, KvState, Transformer};

use crate::linearize::{TokenId, TokenType};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("prefix of {len} tokens does not fit in {max} positions")]
    PrefixTooLong { len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("{ids} token ids but {types} token types")]
    LengthMismatch { ids: usize, types: usize },
    #[error("no positions in scope")]
    NoInScopePositions,
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was trained with vocabulary {expected} but the tokenizer is {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    <F as num_traits::NumCast>::from(x).expect("representable")
}

/// Everything the decoder needs from a model: a next-token distribution
/// for a typed prefix. `State` lets implementations cache work between
/// calls that extend the same prefix.
pub trait LanguageModel {
    type State;

    fn vocab_size(&self) -> usize;

    fn max_positions(&self) -> usize;

    fn new_state(&self) -> Self::State;

    /// Probability of every vocabulary entry following the prefix.
    fn next_token_distribution(
        &self,
        state: &mut Self::State,
        ids: &[TokenId],
        types: &[TokenType],
    ) -> Result<Vec<f64>, ModelError>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    type State = M::State;

    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn max_positions(&self) -> usize {
        (**self).max_positions()
    }

    fn new_state(&self) -> Self::State {
        (**self).new_state()
    }

    fn next_token_distribution(
        &self,
        state: &mut Self::State,
        ids: &[TokenId],
        types: &[TokenType],
    ) -> Result<Vec<f64>, ModelError> {
        (**self).next_token_distribution(state, ids, types)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub token_type_count: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            layers: 4,
            heads: 4,
            hidden_dim: 256,
            ff_dim: 1024,
            max_positions: 512,
            token_type_count: TokenType::COUNT,
            dropout: 0.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration that memorizes the bundled toy corpus quickly.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            layers: 2,
            heads: 4,
            hidden_dim: 64,
            ff_dim: 256,
            max_positions: 320,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.layers == 0 || self.heads == 0 || self.hidden_dim == 0 || self.ff_dim == 0 {
            return bad("layers, heads, hidden_dim and ff_dim must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("hidden_dim must be divisible by heads");
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2");
        }
        if self.token_type_count < TokenType::COUNT {
            return bad("token_type_count must cover the five token types");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}
