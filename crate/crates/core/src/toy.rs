//! Synthetic template dialogues with known emotions, dialogue acts and
//! topical words, for tests and demos.
//!
//! Every utterance has one or two sentences. A sentence is an optional
//! emotion interjection followed by a dialogue-act template. Informative
//! utterances carry exactly three topical words drawn from one of six
//! ordered clusters: either continuing the cluster from the last topical
//! word said so far, or jumping to a random cluster position. Generic
//! utterances carry none.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSession, CorpusSplit, Phrase, SemanticAnnotation, Split, Utterance};
use crate::labels::{DialogueAct, Emotion, Label, Speaker};
use crate::text;

pub const CLUSTERS: [(&str, [&str; 8]); 6] = [
    ("music", ["jazz", "guitar", "piano", "drums", "violin", "opera", "concert", "rap"]),
    ("food", ["pizza", "sushi", "noodles", "pasta", "curry", "tacos", "salad", "cheese"]),
    ("sports", ["soccer", "tennis", "hockey", "golf", "boxing", "skiing", "surfing", "baseball"]),
    ("travel", ["paris", "tokyo", "beaches", "mountains", "cruises", "museums", "hiking", "camping"]),
    ("pets", ["puppies", "kittens", "parrots", "hamsters", "rabbits", "goldfish", "turtles", "ponies"]),
    ("work", ["meetings", "emails", "deadlines", "reports", "spreadsheets", "interviews", "projects", "budgets"]),
];

fn interjection(e: Emotion) -> Option<&'static str> {
    match e {
        Emotion::Fear => Some("yikes ,"),
        Emotion::Surprise => Some("wow ,"),
        Emotion::Anger => Some("ugh ,"),
        Emotion::Disgust => Some("eww ,"),
        Emotion::Like => Some("aww ,"),
        Emotion::Happiness => Some("yay ,"),
        Emotion::Sadness => Some("sigh ,"),
        Emotion::None => None,
    }
}

/// Template for a dialogue act with 0 to 3 topical slots, written as
/// space-separated pieces with `{}` marking slots.
fn template(da: DialogueAct, slots: usize) -> &'static str {
    use DialogueAct::*;
    match (da, slots) {
        (Inform, 0) => "i had a really long day at home today .",
        (Inform, 1) => "my friend told me about {} yesterday .",
        (Inform, 2) => "i have been thinking about {} and {} lately .",
        (Inform, _) => "i really enjoy {} , {} and {} these days .",
        (Question, 0) => "how has your week been going so far ?",
        (Question, 1) => "what do you think about {} ?",
        (Question, 2) => "have you ever tried {} with {} ?",
        (Question, _) => "do you prefer {} , {} or {} ?",
        (Directive, 0) => "please tell me something fun that happened to you .",
        (Directive, 1) => "let's talk about {} tonight .",
        (Directive, 2) => "you should try {} and {} soon !",
        (Directive, _) => "please tell me more about {} , {} and {} .",
        (Commissive, 0) => "i promise i will call you back later tonight .",
        (Commissive, 1) => "i will look into {} for you .",
        (Commissive, 2) => "i promise to check out {} and {} .",
        (Commissive, _) => "i will bring {} , {} and {} next time .",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub train_sessions: usize,
    pub valid_sessions: usize,
    pub test_sessions: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    /// Probability that an utterance has no topical words.
    pub generic_prob: f64,
    /// Probability that topical words continue the current cluster.
    pub continue_prob: f64,
    pub two_sentence_prob: f64,
    pub no_emotion_prob: f64,
    /// Labeled sentences emitted for each classifier.
    pub classifier_examples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 7,
            train_sessions: 200,
            valid_sessions: 20,
            test_sessions: 100,
            min_utterances: 2,
            max_utterances: 4,
            generic_prob: 0.5,
            continue_prob: 0.5,
            two_sentence_prob: 0.4,
            no_emotion_prob: 0.4,
            classifier_examples: 600,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub split: CorpusSplit,
    pub da_examples: Vec<(String, String)>,
    pub emotion_examples: Vec<(String, String)>,
    /// Every non-topical piece the templates can produce.
    pub stoplist: Vec<String>,
    pub topical_words: Vec<String>,
}

/// Position in the cluster table: `(cluster, index)`.
type Slot = (usize, usize);

struct Generator {
    rng: ChaCha8Rng,
    config: ToyConfig,
}

struct Sentence {
    text: String,
    emotion: Emotion,
    da: DialogueAct,
}

impl Generator {
    fn emotion(&mut self) -> Emotion {
        if self.rng.random_bool(self.config.no_emotion_prob) {
            Emotion::None
        } else {
            Emotion::ALL[self.rng.random_range(0..7)]
        }
    }

    fn sentence(&mut self, words: &[&str]) -> Sentence {
        let emotion = self.emotion();
        let da = DialogueAct::ALL[self.rng.random_range(0..4)];
        let mut filled = String::new();
        let mut rest = words.iter();
        for (i, part) in template(da, words.len()).split("{}").enumerate() {
            if i > 0 {
                filled.push_str(rest.next().expect("slot count"));
            }
            filled.push_str(part);
        }
        let raw = match interjection(emotion) {
            Some(i) => format!("{i} {filled}"),
            None => filled,
        };
        Sentence { text: text::canonicalize(&raw), emotion, da }
    }

    fn topical(&mut self, last: Option<Slot>) -> Vec<Slot> {
        let (c, start) = match last {
            Some(s) if self.rng.random_bool(self.config.continue_prob) => s,
            _ => (self.rng.random_range(0..CLUSTERS.len()), self.rng.random_range(0..8)),
        };
        (0..3).map(|k| (c, (start + k) % 8)).collect()
    }

    fn utterance(&mut self, speaker: Speaker, last: &mut Option<Slot>) -> Utterance {
        let two = self.rng.random_bool(self.config.two_sentence_prob);
        let slots = if self.rng.random_bool(self.config.generic_prob) { Vec::new() } else { self.topical(*last) };
        if let Some(&s) = slots.last() {
            *last = Some(s);
        }
        let words: Vec<&str> = slots.iter().map(|&(c, i)| CLUSTERS[c].1[i]).collect();
        let sentences = match (two, words.len()) {
            (false, _) => vec![self.sentence(&words)],
            (true, 0) => vec![self.sentence(&[]), self.sentence(&[])],
            (true, _) => vec![self.sentence(&words[..2]), self.sentence(&words[2..])],
        };
        let text = sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
        Utterance {
            speaker,
            text,
            annotation: Some(SemanticAnnotation {
                emotions: sentences.iter().map(|s| s.emotion).collect(),
                dialogue_acts: sentences.iter().map(|s| s.da).collect(),
                topical_words: words.iter().map(|w| Phrase(vec![w.to_string()])).collect(),
            }),
            sentences: sentences.into_iter().map(|s| s.text).collect(),
        }
    }

    fn session(&mut self, id: String) -> AnnotatedSession {
        let n = self.rng.random_range(self.config.min_utterances..=self.config.max_utterances);
        let mut last = None;
        let utterances = (0..n)
            .map(|i| self.utterance(if i % 2 == 0 { Speaker::Human } else { Speaker::Machine }, &mut last))
            .collect();
        AnnotatedSession { session_id: id, context: String::new(), utterances }
    }

    fn labeled(&mut self) -> (String, DialogueAct, Emotion) {
        let k = self.rng.random_range(0..4);
        let start = (self.rng.random_range(0..CLUSTERS.len()), self.rng.random_range(0..8));
        let words: Vec<&str> = (0..k).map(|j| CLUSTERS[start.0].1[(start.1 + j) % 8]).collect();
        let s = self.sentence(&words);
        (s.text, s.da, s.emotion)
    }
}

/// Generates the three splits and the classifier training sentences.
pub fn generate(config: &ToyConfig) -> ToyCorpus {
    let mut g = Generator { rng: ChaCha8Rng::seed_from_u64(config.seed), config: config.clone() };
    let sessions = |split: Split, n: usize, g: &mut Generator| -> Vec<AnnotatedSession> {
        let name = serde_json::to_value(split).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        (0..n).map(|i| g.session(format!("toy-{name}-{i:04}"))).collect()
    };
    let train = sessions(Split::Train, config.train_sessions, &mut g);
    let valid = sessions(Split::Valid, config.valid_sessions, &mut g);
    let test = sessions(Split::Test, config.test_sessions, &mut g);

    let mut da_examples = Vec::with_capacity(config.classifier_examples);
    let mut emotion_examples = Vec::with_capacity(config.classifier_examples);
    for _ in 0..config.classifier_examples {
        let (s, da, e) = g.labeled();
        da_examples.push((s.clone(), da.name().to_string()));
        emotion_examples.push((s, e.name().to_string()));
    }

    let topical_words: Vec<String> = CLUSTERS.iter().flat_map(|(_, w)| w.iter().map(|s| s.to_string())).collect();
    let mut stoplist: Vec<String> = Vec::new();
    for &da in DialogueAct::ALL.iter() {
        for slots in 0..4 {
            stoplist.extend(text::pieces(template(da, slots)).into_iter().filter(|p| *p != "{" && *p != "}").map(str::to_string));
        }
    }
    for &e in Emotion::ALL.iter() {
        stoplist.extend(interjection(e).into_iter().flat_map(text::pieces).map(str::to_string));
    }
    stoplist.sort();
    stoplist.dedup();

    ToyCorpus { split: CorpusSplit { train, valid, test }, da_examples, emotion_examples, stoplist, topical_words }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sessions_are_valid_and_deterministic() {
        let a = generate(&ToyConfig::default());
        let b = generate(&ToyConfig::default());
        assert_eq!(a, b);
        a.split.validate().unwrap();
        assert_eq!(a.split.train.len(), 200);
    }

    #[test]
    fn utterances_respect_length_and_topical_rules() {
        let corpus = generate(&ToyConfig::default());
        let all = corpus.split.train.iter().chain(&corpus.split.valid).chain(&corpus.split.test);
        let mut generic = 0;
        let mut total = 0;
        for s in all {
            for u in &s.utterances {
                let n = text::pieces(&u.text).len();
                assert!((9..=32).contains(&n), "{n}: {}", u.text);
                assert_eq!(text::canonicalize(&u.text), u.text);
                let ann = u.annotation.as_ref().unwrap();
                assert!(ann.topical_words.is_empty() || ann.topical_words.len() == 3);
                for w in &ann.topical_words {
                    assert!(text::pieces(&u.text).contains(&w.0[0].as_str()));
                }
                generic += ann.topical_words.is_empty() as usize;
                total += 1;
            }
        }
        let share = generic as f64 / total as f64;
        assert!((0.4..0.6).contains(&share), "{share}");
    }

    #[test]
    fn stoplist_excludes_topical_words() {
        let corpus = generate(&ToyConfig::default());
        assert_eq!(corpus.topical_words.len(), 48);
        for w in &corpus.topical_words {
            assert!(corpus.stoplist.binary_search(w).is_err(), "{w}");
        }
        assert!(corpus.stoplist.iter().any(|w| w == "?"));
    }
}
