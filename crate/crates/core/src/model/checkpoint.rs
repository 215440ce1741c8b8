//! Single-file checkpoints: a magic line, one JSON header line, then the
//! parameters as little-endian `f32`. The header embeds the vocabulary so a
//! checkpoint is self-contained; nothing time-dependent is written, so equal
//! training runs produce equal files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ModelConfig, ModelError, TensorSpec, TrainOutcome, TrainSchedule, Transformer};
use crate::linearize::{LinearizationScheme, TokenId, TokenType, Tokenizer};

pub const CHECKPOINT_MAGIC: &str = "DIALPLAN-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub steps: u64,
    pub epochs: u64,
    pub stop_reason: Option<String>,
    pub final_lr: f64,
    pub best_valid_ppl: Option<f64>,
    pub train_examples: usize,
    pub schedule: Option<TrainSchedule>,
}

impl TrainingMetadata {
    pub fn from_outcome(outcome: &TrainOutcome, schedule: &TrainSchedule, train_examples: usize) -> Self {
        TrainingMetadata {
            steps: outcome.steps,
            epochs: outcome.epochs,
            stop_reason: serde_json::to_value(outcome.stop_reason).ok().and_then(|v| v.as_str().map(str::to_string)),
            final_lr: outcome.final_lr,
            best_valid_ppl: outcome.best_valid_ppl,
            train_examples,
            schedule: Some(schedule.clone()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyHeader {
    fingerprint: String,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    scheme: LinearizationScheme,
    vocabulary: VocabularyHeader,
    training: TrainingMetadata,
    tensors: Vec<TensorSpec>,
    parameters: usize,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: Transformer<f32>,
    pub tokenizer: Tokenizer,
    pub scheme: LinearizationScheme,
    pub metadata: TrainingMetadata,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl ModelCheckpoint {
    pub fn new(
        model: Transformer<f32>,
        tokenizer: Tokenizer,
        scheme: LinearizationScheme,
        metadata: TrainingMetadata,
    ) -> Result<Self, ModelError> {
        if model.config().vocab_size != tokenizer.vocab_size() {
            return Err(bad(format!(
                "model vocabulary {} differs from tokenizer vocabulary {}",
                model.config().vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(ModelCheckpoint { model, tokenizer, scheme, metadata })
    }

    pub fn fingerprint(&self) -> &str {
        self.tokenizer.fingerprint()
    }

    /// Fails unless `tokenizer` is the vocabulary this model was trained with.
    pub fn check_tokenizer(&self, tokenizer: &Tokenizer) -> Result<(), ModelError> {
        if tokenizer.fingerprint() != self.fingerprint() {
            return Err(ModelError::FingerprintMismatch {
                expected: self.fingerprint().to_string(),
                found: tokenizer.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: "f32".into(),
            config: self.model.config().clone(),
            scheme: self.scheme.clone(),
            vocabulary: VocabularyHeader {
                fingerprint: self.fingerprint().to_string(),
                tokens: self.tokenizer.tokens().to_vec(),
            },
            training: self.metadata.clone(),
            tensors: self.model.tensor_specs().to_vec(),
            parameters: self.model.num_params(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        out.reserve(4 * self.model.num_params());
        for p in self.model.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(CHECKPOINT_MAGIC.as_bytes()) {
            return Err(bad("not a checkpoint file"));
        }
        let header_line = lines.next().ok_or_else(|| bad("missing header"))?;
        let header: Header = serde_json::from_slice(header_line).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        if header.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        let payload = lines.next().unwrap_or(&[]);
        if payload.len() != 4 * header.parameters {
            return Err(bad(format!("expected {} payload bytes, found {}", 4 * header.parameters, payload.len())));
        }
        let params: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tokenizer = Tokenizer::from_token_list(header.vocabulary.tokens).map_err(|e| bad(e.to_string()))?;
        if tokenizer.fingerprint() != header.vocabulary.fingerprint {
            return Err(bad("embedded vocabulary does not match its fingerprint"));
        }
        let model = Transformer::from_params(header.config, params)?;
        if model.tensor_specs() != header.tensors.as_slice() {
            return Err(bad("tensor layout does not match the configuration"));
        }
        ModelCheckpoint::new(model, tokenizer, header.scheme, header.training)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let io = |source| ModelError::Io { path: path.to_path_buf(), source };
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

impl LanguageModel for ModelCheckpoint {
    type State = <Transformer<f32> as LanguageModel>::State;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn max_positions(&self) -> usize {
        self.model.max_positions()
    }

    fn new_state(&self) -> Self::State {
        self.model.new_state()
    }

    fn next_token_distribution(
        &self,
        state: &mut Self::State,
        ids: &[TokenId],
        types: &[TokenType],
    ) -> Result<Vec<f64>, ModelError> {
        self.model.next_token_distribution(state, ids, types)
    }
}
