//! Automatic semantic annotation of dialogue corpora: sentence splitting,
//! dialogue-act and emotion classification, topical-word alignment and
//! label-transition statistics.

mod classifier;
mod sentences;
mod topical;
mod transitions;

use std::path::PathBuf;

pub use classifier::{train_classifier, ClassifierMetadata, LinearClassifier, SentenceClassifier, TrainOptions};
pub use sentences::{split_sentences, SentenceSplitter, DEFAULT_TERMINATORS};
pub use topical::{
    build_topical_vocabulary, BackgroundFrequencies, SalienceExtractor, ScoredPhrase, TopicalExtractor,
    TopicalVocabulary,
};
pub use transitions::{transition_matrix, LabelVariable, TransitionMatrix};

use crate::corpus::{AnnotatedSession, Phrase, SemanticAnnotation, Utterance};
use crate::labels::{DialogueAct, Emotion, Label};

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("vocabulary size limit must be at least 1")]
    InvalidSizeLimit,
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(String),
    #[error("label `{0}` has no training examples")]
    MissingLabel(String),
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("classifier label `{label}` is not a valid {kind} label")]
    LabelSetMismatch { kind: &'static str, label: String },
    #[error("{0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Topical phrases of the vocabulary that occur in the utterance.
pub fn align_topical_words(utterance: &Utterance, vocab: &TopicalVocabulary) -> Vec<Phrase> {
    vocab.align(&utterance.text)
}

/// Applies classifiers and vocabulary to sentences.
pub struct Annotator<'a> {
    vocab: &'a TopicalVocabulary,
    da: &'a dyn SentenceClassifier,
    emotion: &'a dyn SentenceClassifier,
    splitter: SentenceSplitter,
    da_map: Vec<DialogueAct>,
    emotion_map: Vec<Emotion>,
}

fn label_map<L: Label>(clf: &dyn SentenceClassifier, kind: &'static str) -> Result<Vec<L>, AnnotateError> {
    clf.label_set()
        .iter()
        .map(|l| L::from_name(l).ok_or_else(|| AnnotateError::LabelSetMismatch { kind, label: l.clone() }))
        .collect()
}

impl<'a> Annotator<'a> {
    pub fn new(
        vocab: &'a TopicalVocabulary,
        da: &'a dyn SentenceClassifier,
        emotion: &'a dyn SentenceClassifier,
    ) -> Result<Self, AnnotateError> {
        Ok(Annotator {
            vocab,
            da,
            emotion,
            splitter: SentenceSplitter::default(),
            da_map: label_map(da, "dialogue act")?,
            emotion_map: label_map(emotion, "emotion")?,
        })
    }

    pub fn with_splitter(mut self, splitter: SentenceSplitter) -> Self {
        self.splitter = splitter;
        self
    }

    pub fn dialogue_acts(&self, sentences: &[&str]) -> Vec<DialogueAct> {
        sentences.iter().map(|s| self.da_map[self.da.predict_index(s)]).collect()
    }

    pub fn emotions(&self, sentences: &[&str]) -> Vec<Emotion> {
        sentences.iter().map(|s| self.emotion_map[self.emotion.predict_index(s)]).collect()
    }

    pub fn sentences<'t>(&self, text: &'t str) -> Vec<&'t str> {
        self.splitter.split(text)
    }

    /// Annotation of free text, sentence-split with the configured splitter.
    pub fn annotate_text(&self, text: &str) -> (Vec<String>, SemanticAnnotation) {
        let sentences = self.splitter.split(text);
        let annotation = SemanticAnnotation {
            emotions: self.emotions(&sentences),
            dialogue_acts: self.dialogue_acts(&sentences),
            topical_words: self.vocab.align(text),
        };
        (sentences.into_iter().map(str::to_string).collect(), annotation)
    }

    pub fn annotate_utterance(&self, utterance: &Utterance) -> Utterance {
        let (sentences, annotation) = self.annotate_text(&utterance.text);
        Utterance { speaker: utterance.speaker, text: utterance.text.clone(), sentences, annotation: Some(annotation) }
    }

    pub fn annotate_session(&self, session: &AnnotatedSession) -> AnnotatedSession {
        AnnotatedSession {
            session_id: session.session_id.clone(),
            context: session.context.clone(),
            utterances: session.utterances.iter().map(|u| self.annotate_utterance(u)).collect(),
        }
    }
}

/// Annotates every utterance of every session. Texts are kept verbatim.
pub fn annotate_corpus(
    sessions: &[AnnotatedSession],
    vocab: &TopicalVocabulary,
    da_clf: &dyn SentenceClassifier,
    emo_clf: &dyn SentenceClassifier,
) -> Result<Vec<AnnotatedSession>, AnnotateError> {
    let annotator = Annotator::new(vocab, da_clf, emo_clf)?;
    Ok(sessions.iter().map(|s| annotator.annotate_session(s)).collect())
}
