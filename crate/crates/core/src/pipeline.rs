//! Linearize, train and package a checkpoint in one call.

use crate::corpus::AnnotatedSession;
use crate::linearize::{training_examples, LinearizationScheme, LinearizeError, Tokenizer};
use crate::model::{train, LogRecord, ModelCheckpoint, ModelConfig, ModelError, TrainSchedule, TrainingMetadata};
use crate::toy::ToyCorpus;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid scheme: {0}")]
    Scheme(String),
}

pub struct Trained {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<LogRecord>,
}

/// Trains on both views of every training session. The scheme's sequence
/// limit is lowered to the model's positions when it exceeds them.
pub fn train_checkpoint(
    train_sessions: &[AnnotatedSession],
    valid_sessions: &[AnnotatedSession],
    tokenizer: Tokenizer,
    scheme: &LinearizationScheme,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    on_log: impl FnMut(&LogRecord),
) -> Result<Trained, PipelineError> {
    let scheme = LinearizationScheme {
        max_sequence_length: scheme.max_sequence_length.min(config.max_positions),
        ..scheme.clone()
    };
    scheme.validate().map_err(PipelineError::Scheme)?;
    let train_ex = training_examples(train_sessions, &scheme, &tokenizer)?;
    let valid_ex = training_examples(valid_sessions, &scheme, &tokenizer)?;
    let outcome = train(&train_ex, &valid_ex, config, schedule, on_log)?;
    let metadata = TrainingMetadata::from_outcome(&outcome, schedule, train_ex.len());
    let log = outcome.log.clone();
    let checkpoint = ModelCheckpoint::new(outcome.model, tokenizer, scheme, metadata)?;
    Ok(Trained { checkpoint, log })
}

/// The toy model: toy configuration and schedule, vocabulary from the
/// training split, with or without planning spans.
pub fn train_toy(corpus: &ToyCorpus, include_planning: bool, on_log: impl FnMut(&LogRecord)) -> Result<Trained, PipelineError> {
    let tokenizer = Tokenizer::from_corpus(&corpus.split.train);
    let config = ModelConfig::toy(tokenizer.vocab_size());
    let scheme = LinearizationScheme { include_planning, ..LinearizationScheme::default() };
    train_checkpoint(&corpus.split.train, &corpus.split.valid, tokenizer, &scheme, &config, &TrainSchedule::toy(), on_log)
}
