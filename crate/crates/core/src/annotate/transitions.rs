use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedSession;
use crate::labels::{DialogueAct, Emotion, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelVariable {
    DialogueAct,
    Emotion,
}

/// Counts of label transitions between consecutive utterances.
/// Rows index the previous utterance, columns the current one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub probabilities: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        let probabilities = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    vec![0.0; row.len()]
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                }
            })
            .collect();
        TransitionMatrix { labels, counts, probabilities }
    }

    pub fn count(&self, from: &str, to: &str) -> u64 {
        let i = self.labels.iter().position(|l| l == from);
        let j = self.labels.iter().position(|l| l == to);
        match (i, j) {
            (Some(i), Some(j)) => self.counts[i][j],
            _ => 0,
        }
    }
}

fn utterance_labels(session: &AnnotatedSession, variable: LabelVariable) -> Vec<Vec<usize>> {
    session
        .utterances
        .iter()
        .map(|u| match (&u.annotation, variable) {
            (None, _) => Vec::new(),
            (Some(a), LabelVariable::DialogueAct) => a.dialogue_acts.iter().map(|l| l.index()).collect(),
            (Some(a), LabelVariable::Emotion) => a.emotions.iter().map(|l| l.index()).collect(),
        })
        .collect()
}

/// Every label of utterance `t` is paired with every label of utterance
/// `t + 1` (the full per-sentence lists, duplicates included).
pub fn transition_matrix(sessions: &[AnnotatedSession], variable: LabelVariable) -> TransitionMatrix {
    let labels: Vec<String> = match variable {
        LabelVariable::DialogueAct => DialogueAct::ALL.iter().map(|l| l.name().to_string()).collect(),
        LabelVariable::Emotion => Emotion::ALL.iter().map(|l| l.name().to_string()).collect(),
    };
    let n = labels.len();
    let mut counts = vec![vec![0u64; n]; n];
    for s in sessions {
        let per_utt = utterance_labels(s, variable);
        for pair in per_utt.windows(2) {
            for &a in &pair[0] {
                for &b in &pair[1] {
                    counts[a][b] += 1;
                }
            }
        }
    }
    TransitionMatrix::from_counts(labels, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SemanticAnnotation, Utterance};
    use crate::labels::Speaker;

    fn utt(speaker: Speaker, das: &[DialogueAct]) -> Utterance {
        Utterance {
            speaker,
            text: "x".into(),
            sentences: vec!["x".into(); das.len()],
            annotation: Some(SemanticAnnotation {
                emotions: vec![Emotion::None; das.len()],
                dialogue_acts: das.to_vec(),
                topical_words: vec![],
            }),
        }
    }

    #[test]
    fn hand_counted_transition() {
        let s = AnnotatedSession {
            session_id: "s".into(),
            context: String::new(),
            utterances: vec![
                utt(Speaker::Human, &[DialogueAct::Inform]),
                utt(Speaker::Machine, &[DialogueAct::Question]),
            ],
        };
        let m = transition_matrix(&[s], LabelVariable::DialogueAct);
        assert_eq!(m.count("Inform", "Question"), 1);
        assert_eq!(m.counts.iter().flatten().sum::<u64>(), 1);
        assert_eq!(m.probabilities[0][1], 1.0);
    }

    #[test]
    fn multisets_pair_flattened() {
        let s = AnnotatedSession {
            session_id: "s".into(),
            context: String::new(),
            utterances: vec![
                utt(Speaker::Human, &[DialogueAct::Inform, DialogueAct::Inform]),
                utt(Speaker::Machine, &[DialogueAct::Question, DialogueAct::Directive]),
                utt(Speaker::Human, &[DialogueAct::Commissive]),
            ],
        };
        let m = transition_matrix(&[s], LabelVariable::DialogueAct);
        assert_eq!(m.count("Inform", "Question"), 2);
        assert_eq!(m.count("Inform", "Directive"), 2);
        assert_eq!(m.count("Question", "Commissive"), 1);
        assert_eq!(m.count("Directive", "Commissive"), 1);
        for row in &m.probabilities {
            let sum: f64 = row.iter().sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_utterance_gives_zero_matrix() {
        let s = AnnotatedSession {
            session_id: "s".into(),
            context: String::new(),
            utterances: vec![utt(Speaker::Human, &[DialogueAct::Inform])],
        };
        let m = transition_matrix(&[s], LabelVariable::Emotion);
        assert_eq!(m.labels.len(), 8);
        assert!(m.counts.iter().flatten().all(|&c| c == 0));
        assert!(m.probabilities.iter().flatten().all(|&p| p == 0.0));
    }
}
