//! Automatic metrics for generated responses and for the understanding
//! stage, and corpus-level reports built from them.

mod embedding;
mod metrics;

use serde::{Deserialize, Serialize};

pub use embedding::{embedding_metrics, EmbeddingScores, EmbeddingTable, PieceSegmenter, Segmenter};
pub use metrics::{bleu_n, dist_n, label_f1, set_f1, topical_f1, topical_recall, units, BleuUnit};

use crate::annotate::Annotator;
use crate::corpus::{AnnotatedSession, SemanticAnnotation};
use crate::decode::{DecodeError, Decoder, HistoryEntry};
use crate::labels::{DialogueAct, Emotion, Speaker};
use crate::model::LanguageModel;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{pred} predictions for {gold} gold samples")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("gold labels are empty")]
    EmptyGold,
    #[error("no samples to evaluate")]
    EmptyTestSet,
    #[error("session {session} utterance {utterance} is not annotated")]
    Unannotated { session: String, utterance: usize },
    #[error("embedding table: {0}")]
    Embedding(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Responses follow the model's own plans.
    Planned,
    /// The gold annotation of each reference response overrides the plan.
    GoldVariables,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub session_id: String,
    pub utterance: usize,
    pub seed: u64,
    pub reference: String,
    pub response: String,
    pub gold: SemanticAnnotation,
    pub planned: Option<SemanticAnnotation>,
    pub understood: Option<SemanticAnnotation>,
    pub bleu: [f64; 3],
    pub embedding: EmbeddingScores,
    pub topical_recall: Option<f64>,
    pub response_dialogue_acts: Option<Vec<DialogueAct>>,
    pub response_emotions: Option<Vec<Emotion>>,
}

/// Corpus scores, each in [0, 1] (`ppl` is at least 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub samples_evaluated: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub emb_average: f64,
    pub emb_extreme: f64,
    pub dist_1: f64,
    pub dist_2: f64,
    /// Mean over samples whose reference has topical words.
    pub topical_recall: f64,
    /// Labels of generated responses against the reference labels.
    pub das_f1: Option<f64>,
    pub emotions_f1: Option<f64>,
    /// Understanding of the preceding human utterance.
    pub topical_f1: Option<f64>,
    pub ppl: Option<f64>,
    pub samples: Vec<GenerationSample>,
}

/// One row of the generation tables, keyed by column name. Scores are
/// fractions in [0, 1], not percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(rename = "BLEU-1")]
    pub bleu_1: f64,
    #[serde(rename = "BLEU-2")]
    pub bleu_2: f64,
    #[serde(rename = "BLEU-3")]
    pub bleu_3: f64,
    #[serde(rename = "PPL")]
    pub ppl: Option<f64>,
    #[serde(rename = "Average")]
    pub average: f64,
    #[serde(rename = "Extreme")]
    pub extreme: f64,
    #[serde(rename = "Dist-1")]
    pub dist_1: f64,
    #[serde(rename = "Dist-2")]
    pub dist_2: f64,
    #[serde(rename = "Topical-Recall")]
    pub topical_recall: f64,
    #[serde(rename = "DAs-F1")]
    pub das_f1: Option<f64>,
    #[serde(rename = "Emotions-F1")]
    pub emotions_f1: Option<f64>,
}

impl MetricReport {
    pub fn table_row(&self) -> TableRow {
        TableRow {
            bleu_1: self.bleu_1,
            bleu_2: self.bleu_2,
            bleu_3: self.bleu_3,
            ppl: self.ppl,
            average: self.emb_average,
            extreme: self.emb_extreme,
            dist_1: self.dist_1,
            dist_2: self.dist_2,
            topical_recall: self.topical_recall,
            das_f1: self.das_f1,
            emotions_f1: self.emotions_f1,
        }
    }
}

/// Scoring resources shared by every sample.
pub struct EvalResources<'a> {
    /// Classifies generated responses; label F1 scores are skipped without it.
    pub annotator: Option<&'a Annotator<'a>>,
    pub embeddings: &'a EmbeddingTable,
    pub segmenter: &'a dyn Segmenter,
    pub bleu_unit: BleuUnit,
}

fn annotation(s: &AnnotatedSession, i: usize) -> Result<&SemanticAnnotation, EvalError> {
    s.utterances[i].annotation.as_ref().ok_or_else(|| EvalError::Unannotated { session: s.session_id.clone(), utterance: i })
}

fn history(s: &AnnotatedSession, upto: usize) -> Vec<HistoryEntry> {
    s.utterances[..upto]
        .iter()
        .map(|u| HistoryEntry { speaker: u.speaker, text: u.text.clone(), annotation: u.annotation.clone() })
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Generates every machine turn that answers a human utterance, with gold
/// history, and scores it against the reference. Sample `k` uses seed
/// `seed + k`.
pub fn evaluate_generation<M: LanguageModel>(
    decoder: &Decoder<'_, M>,
    sessions: &[AnnotatedSession],
    mode: EvalMode,
    res: &EvalResources<'_>,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    let mut samples = Vec::new();
    let mut understood_topical = (Vec::new(), Vec::new());
    for s in sessions {
        for i in 1..s.utterances.len() {
            let (human, machine) = (&s.utterances[i - 1], &s.utterances[i]);
            if human.speaker != Speaker::Human || machine.speaker != Speaker::Machine {
                continue;
            }
            let gold = annotation(s, i)?.clone();
            let sample_seed = seed.wrapping_add(samples.len() as u64);
            let plan_override = (mode == EvalMode::GoldVariables).then_some(&gold);
            let trace = decoder.respond(&s.context, &history(s, i - 1), &human.text, plan_override, sample_seed)?;
            if let Some(u) = &trace.understood {
                understood_topical.0.push(u.topical_words.clone());
                understood_topical.1.push(annotation(s, i - 1)?.topical_words.clone());
            }
            let hyp = units(&trace.response, res.bleu_unit);
            let reference = units(&machine.text, res.bleu_unit);
            let (das, emotions) = match res.annotator {
                Some(a) => {
                    let sentences = a.sentences(&trace.response);
                    (Some(a.dialogue_acts(&sentences)), Some(a.emotions(&sentences)))
                }
                None => (None, None),
            };
            samples.push(GenerationSample {
                session_id: s.session_id.clone(),
                utterance: i,
                seed: sample_seed,
                bleu: [1, 2, 3].map(|n| bleu_n(&hyp, &reference, n)),
                embedding: embedding_metrics(&trace.response, &machine.text, res.embeddings, res.segmenter),
                topical_recall: topical_recall(&trace.response, &gold.topical_words),
                reference: machine.text.clone(),
                response: trace.response,
                gold,
                planned: trace.planned,
                understood: trace.understood,
                response_dialogue_acts: das,
                response_emotions: emotions,
            });
        }
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let responses: Vec<Vec<String>> = samples.iter().map(|x| units(&x.response, res.bleu_unit)).collect();
    let gold_das: Vec<_> = samples.iter().map(|x| x.gold.dialogue_acts.clone()).collect();
    let gold_emotions: Vec<_> = samples.iter().map(|x| x.gold.emotions.clone()).collect();
    let pred_das: Option<Vec<_>> = samples.iter().map(|x| x.response_dialogue_acts.clone()).collect();
    let pred_emotions: Option<Vec<_>> = samples.iter().map(|x| x.response_emotions.clone()).collect();
    let das_f1 = pred_das.map(|p| label_f1(&p, &gold_das)).transpose()?;
    let emotions_f1 = pred_emotions.map(|p| label_f1(&p, &gold_emotions)).transpose()?;
    let topical_f1 =
        if understood_topical.0.is_empty() { None } else { Some(topical_f1(&understood_topical.0, &understood_topical.1)?) };
    Ok(MetricReport {
        mode,
        samples_evaluated: samples.len(),
        bleu_1: mean(samples.iter().map(|x| x.bleu[0])),
        bleu_2: mean(samples.iter().map(|x| x.bleu[1])),
        bleu_3: mean(samples.iter().map(|x| x.bleu[2])),
        emb_average: mean(samples.iter().map(|x| x.embedding.average)),
        emb_extreme: mean(samples.iter().map(|x| x.embedding.extreme)),
        dist_1: dist_n(&responses, 1),
        dist_2: dist_n(&responses, 2),
        topical_recall: mean(samples.iter().filter_map(|x| x.topical_recall)),
        das_f1,
        emotions_f1,
        topical_f1,
        ppl: None,
        samples,
    })
}

/// Understanding quality on every human utterance, with gold history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderstandingReport {
    pub samples_evaluated: usize,
    pub topical_f1: f64,
    pub das_f1: f64,
    pub emotions_f1: f64,
    /// Share of utterances whose whole annotation was recovered.
    pub exact_match: f64,
}

pub fn evaluate_understanding<M: LanguageModel>(
    decoder: &Decoder<'_, M>,
    sessions: &[AnnotatedSession],
) -> Result<UnderstandingReport, EvalError> {
    let (mut pred, mut gold) = (Vec::<SemanticAnnotation>::new(), Vec::<SemanticAnnotation>::new());
    for s in sessions {
        for (i, u) in s.utterances.iter().enumerate() {
            if u.speaker != Speaker::Human {
                continue;
            }
            let Some((ann, _)) = decoder.understand(&s.context, &history(s, i), &u.text, 0)? else {
                return Err(EvalError::EmptyTestSet);
            };
            pred.push(ann);
            gold.push(annotation(s, i)?.clone());
        }
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let topical = |v: &[SemanticAnnotation]| v.iter().map(|a| a.topical_words.clone()).collect::<Vec<_>>();
    let das = |v: &[SemanticAnnotation]| v.iter().map(|a| a.dialogue_acts.clone()).collect::<Vec<_>>();
    let emotions = |v: &[SemanticAnnotation]| v.iter().map(|a| a.emotions.clone()).collect::<Vec<_>>();
    Ok(UnderstandingReport {
        samples_evaluated: gold.len(),
        topical_f1: topical_f1(&topical(&pred), &topical(&gold))?,
        das_f1: label_f1(&das(&pred), &das(&gold))?,
        emotions_f1: label_f1(&emotions(&pred), &emotions(&gold))?,
        exact_match: pred.iter().zip(&gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64,
    })
}
