//! Annotated dialogue sessions, their line-delimited file format, dataset
//! splits, role-switched training views and corpus statistics.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::labels::{DialogueAct, Emotion, Speaker};
use crate::text;

/// A topical phrase: a short list of content tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Phrase(pub Vec<String>);

impl Phrase {
    /// Builds a phrase from free text using the shared pre-tokenizer.
    pub fn from_text(s: &str) -> Self {
        Phrase(text::pieces(s).into_iter().map(str::to_string).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&text::join(&self.0))
    }
}

/// Emotions, dialogue acts and topical words of one utterance. Emotion and
/// dialogue-act lists hold one label per sentence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticAnnotation {
    pub emotions: Vec<Emotion>,
    pub dialogue_acts: Vec<DialogueAct>,
    pub topical_words: Vec<Phrase>,
}

impl SemanticAnnotation {
    pub fn has_duplicate_phrases(&self) -> bool {
        let mut seen = HashSet::new();
        !self.topical_words.iter().all(|p| seen.insert(p))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<SemanticAnnotation>,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance { speaker, text: text.into(), sentences: Vec::new(), annotation: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSession {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub context: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Valid => "valid.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed session record: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("session `{session_id}`: {reason}")]
    Validation { session_id: String, reason: String },
    #[error("session `{session_id}`: utterance {index} is not annotated")]
    Unannotated { session_id: String, index: usize },
}

fn invalid(session: &AnnotatedSession, reason: impl Into<String>) -> CorpusError {
    CorpusError::Validation { session_id: session.session_id.clone(), reason: reason.into() }
}

/// True when `sentences` are contiguous, in-order slices of `text` separated
/// only by whitespace.
pub fn sentences_cover_text(text: &str, sentences: &[String]) -> bool {
    let mut rest = text;
    for s in sentences {
        rest = rest.trim_start();
        match rest.strip_prefix(s.as_str()) {
            Some(r) if !s.is_empty() => rest = r,
            _ => return false,
        }
    }
    rest.trim().is_empty()
}

impl AnnotatedSession {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.utterances.is_empty() {
            return Err(invalid(self, "session has no utterances"));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Machine };
            if u.speaker != expected {
                return Err(invalid(
                    self,
                    format!("utterance {i}: speakers must alternate starting with human"),
                ));
            }
            if !u.sentences.is_empty() && !sentences_cover_text(&u.text, &u.sentences) {
                return Err(invalid(self, format!("utterance {i}: sentences do not reproduce the text")));
            }
            if let Some(a) = &u.annotation {
                let n = u.sentences.len();
                if a.emotions.len() != n || a.dialogue_acts.len() != n {
                    return Err(invalid(
                        self,
                        format!(
                            "utterance {i}: {} sentences but {} emotions and {} dialogue acts",
                            n,
                            a.emotions.len(),
                            a.dialogue_acts.len()
                        ),
                    ));
                }
                if a.has_duplicate_phrases() {
                    return Err(invalid(self, format!("utterance {i}: duplicate topical phrase")));
                }
                if a.topical_words.iter().any(Phrase::is_empty) {
                    return Err(invalid(self, format!("utterance {i}: empty topical phrase")));
                }
            }
        }
        Ok(())
    }

    pub fn is_annotated(&self) -> bool {
        self.utterances.iter().all(|u| u.annotation.is_some())
    }
}

/// Reads a line-delimited session file and validates every record.
/// Blank lines are ignored.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSession>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut sessions = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let session: AnnotatedSession = serde_json::from_str(&line).map_err(|source| {
            CorpusError::Parse { path: path.to_path_buf(), line: i + 1, source }
        })?;
        session.validate()?;
        if !ids.insert(session.session_id.clone()) {
            return Err(invalid(&session, "duplicate session_id"));
        }
        sessions.push(session);
    }
    Ok(sessions)
}

/// Loads `<dir>/<split>.jsonl`.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<AnnotatedSession>, CorpusError> {
    load_corpus(dir.as_ref().join(split.file_name()))
}

/// Writes one canonical JSON record per line. The file is written to a
/// sibling temporary path and renamed into place.
pub fn save_corpus(sessions: &[AnnotatedSession], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
        for s in sessions {
            let line = serde_json::to_string(s).expect("session serializes");
            w.write_all(line.as_bytes()).map_err(io_err)?;
            w.write_all(b"\n").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<AnnotatedSession>,
    pub valid: Vec<AnnotatedSession>,
    pub test: Vec<AnnotatedSession>,
}

impl CorpusSplit {
    pub fn get(&self, split: Split) -> &[AnnotatedSession] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Checks that no session id occurs in more than one split.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for s in self.get(split) {
                if !seen.insert(s.session_id.as_str()) {
                    return Err(invalid(s, "session_id appears in more than one split"));
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        let split = CorpusSplit {
            train: load_split(dir, Split::Train)?,
            valid: load_split(dir, Split::Valid)?,
            test: load_split(dir, Split::Test)?,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?;
        for split in Split::ALL {
            save_corpus(self.get(split), dir.join(split.file_name()))?;
        }
        Ok(())
    }
}

/// One utterance seen through a training view.
#[derive(Clone, Copy, Debug)]
pub struct ViewUtterance<'a> {
    pub speaker: Speaker,
    pub text: &'a str,
    pub annotation: &'a SemanticAnnotation,
}

/// A session with (possibly) switched speaker roles. Both views of a session
/// borrow the same texts and annotations.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    session: &'a AnnotatedSession,
    flipped: bool,
}

impl<'a> TrainingView<'a> {
    pub fn session(&self) -> &'a AnnotatedSession {
        self.session
    }

    pub fn is_flipped(&self) -> bool {
        self.flipped
    }

    pub fn flip(self) -> Self {
        TrainingView { flipped: !self.flipped, ..self }
    }

    pub fn len(&self) -> usize {
        self.session.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.session.utterances.is_empty()
    }

    pub fn speaker(&self, index: usize) -> Speaker {
        let s = self.session.utterances[index].speaker;
        if self.flipped {
            s.flip()
        } else {
            s
        }
    }

    pub fn context(&self) -> &'a str {
        &self.session.context
    }

    pub fn utterances(&self) -> impl Iterator<Item = ViewUtterance<'a>> + '_ {
        self.session.utterances.iter().enumerate().map(move |(i, u)| ViewUtterance {
            speaker: self.speaker(i),
            text: &u.text,
            annotation: u.annotation.as_ref().expect("views are built from annotated sessions"),
        })
    }

    /// True when the first utterance belongs to the machine.
    pub fn machine_opens(&self) -> bool {
        self.speaker(0) == Speaker::Machine
    }
}

/// Derives the original view and the role-switched view of a session.
pub fn derive_training_views(session: &AnnotatedSession) -> Result<[TrainingView<'_>; 2], CorpusError> {
    if let Some(index) = session.utterances.iter().position(|u| u.annotation.is_none()) {
        return Err(CorpusError::Unannotated { session_id: session.session_id.clone(), index });
    }
    let original = TrainingView { session, flipped: false };
    Ok([original, original.flip()])
}

/// Corpus statistics with the columns of the usual dataset table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sessions: usize,
    pub utterances_per_session: f64,
    pub tokens_per_utterance: f64,
    /// Mean dialogue acts (equivalently emotions) per utterance.
    pub labels_per_utterance: f64,
    pub topical_words_per_utterance: f64,
}

pub fn corpus_stats(sessions: &[AnnotatedSession]) -> StatsReport {
    let utterances: Vec<&Utterance> = sessions.iter().flat_map(|s| &s.utterances).collect();
    if utterances.is_empty() {
        return StatsReport { sessions: sessions.len(), ..Default::default() };
    }
    let n = utterances.len() as f64;
    let tokens: usize = utterances.iter().map(|u| text::pieces(&u.text).len()).sum();
    let labels: usize = utterances
        .iter()
        .map(|u| u.annotation.as_ref().map_or(0, |a| a.dialogue_acts.len()))
        .sum();
    let topical: usize = utterances
        .iter()
        .map(|u| u.annotation.as_ref().map_or(0, |a| a.topical_words.len()))
        .sum();
    StatsReport {
        sessions: sessions.len(),
        utterances_per_session: n / sessions.len() as f64,
        tokens_per_utterance: tokens as f64 / n,
        labels_per_utterance: labels as f64 / n,
        topical_words_per_utterance: topical as f64 / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn annotated(speaker: Speaker, text: &str) -> Utterance {
        Utterance {
            speaker,
            text: text.to_string(),
            sentences: vec![text.to_string()],
            annotation: Some(SemanticAnnotation {
                emotions: vec![Emotion::None],
                dialogue_acts: vec![DialogueAct::Inform],
                topical_words: vec![],
            }),
        }
    }

    fn session(id: &str, texts: &[&str]) -> AnnotatedSession {
        AnnotatedSession {
            session_id: id.to_string(),
            context: String::new(),
            utterances: texts
                .iter()
                .enumerate()
                .map(|(i, t)| annotated(if i % 2 == 0 { Speaker::Human } else { Speaker::Machine }, t))
                .collect(),
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
        save_corpus(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn minimal_session_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let s = session("s1", &["hi there.", "hello."]);
        save_corpus(std::slice::from_ref(&s), &path).unwrap();
        let raw = fs::read_to_string(&path).unwrap();
        assert!(!raw.contains("context"), "empty context is omitted: {raw}");
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, vec![s]);
        assert_eq!(loaded[0].utterances[1].speaker, Speaker::Machine);
        assert_eq!(loaded[0].context, "");
    }

    #[test]
    fn duplicate_session_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let s = session("dup", &["a.", "b."]);
        save_corpus(&[s.clone(), s], &path).unwrap();
        match load_corpus(&path) {
            Err(CorpusError::Validation { session_id, .. }) => assert_eq!(session_id, "dup"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&session("a", &["x."])).unwrap();
        fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match load_corpus(&path) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_alternating_speakers_rejected() {
        let mut s = session("x", &["a.", "b."]);
        s.utterances[1].speaker = Speaker::Human;
        assert!(s.validate().is_err());
        let mut s = session("y", &["a."]);
        s.utterances[0].speaker = Speaker::Machine;
        assert!(s.validate().is_err());
    }

    #[test]
    fn label_count_must_match_sentences() {
        let mut s = session("x", &["a. b."]);
        s.utterances[0].sentences = vec!["a.".into(), "b.".into()];
        assert!(s.validate().is_err());
        let a = s.utterances[0].annotation.as_mut().unwrap();
        a.emotions.push(Emotion::Like);
        a.dialogue_acts.push(DialogueAct::Question);
        s.validate().unwrap();
    }

    #[test]
    fn sentence_cover_check() {
        assert!(sentences_cover_text("Fine. You?", &["Fine.".into(), "You?".into()]));
        assert!(!sentences_cover_text("Fine. You?", &["Fine.".into()]));
        assert!(!sentences_cover_text("Fine. You?", &["You?".into(), "Fine.".into()]));
        assert!(sentences_cover_text("  ", &[]));
    }

    #[test]
    fn views_switch_roles() {
        let s = session("s", &["a.", "b.", "c.", "d."]);
        let [v1, v2] = derive_training_views(&s).unwrap();
        assert_eq!(v1.speaker(0), Speaker::Human);
        assert_eq!(v2.speaker(0), Speaker::Machine);
        assert_eq!(v2.speaker(1), Speaker::Human);
        let back = v2.flip();
        assert!((0..4).all(|i| back.speaker(i) == v1.speaker(i)));
        assert!(std::ptr::eq(v1.session(), v2.session()));
    }

    #[test]
    fn single_utterance_views() {
        let s = session("s", &["only."]);
        let [v1, v2] = derive_training_views(&s).unwrap();
        assert!(!v1.machine_opens());
        assert!(v2.machine_opens());
        assert!(v2.utterances().all(|u| u.speaker == Speaker::Machine));
    }

    #[test]
    fn unannotated_session_has_no_views() {
        let mut s = session("s", &["a.", "b."]);
        s.utterances[1].annotation = None;
        assert!(matches!(derive_training_views(&s), Err(CorpusError::Unannotated { index: 1, .. })));
    }

    #[test]
    fn stats_hand_count() {
        assert_eq!(corpus_stats(&[]), StatsReport::default());
        let s = session("s", &["a b c", "d e f"]);
        let r = corpus_stats(&[s]);
        assert_eq!(r.sessions, 1);
        assert_eq!(r.utterances_per_session, 2.0);
        assert_eq!(r.tokens_per_utterance, 3.0);
        assert_eq!(r.labels_per_utterance, 1.0);
        assert_eq!(r.topical_words_per_utterance, 0.0);
    }

    #[test]
    fn splits_must_be_disjoint() {
        let split = CorpusSplit {
            train: vec![session("a", &["x."])],
            valid: vec![session("a", &["y."])],
            test: vec![],
        };
        assert!(split.validate().is_err());
    }

    fn arb_session() -> impl Strategy<Value = AnnotatedSession> {
        let sentence = "[a-z]{1,6}( [a-z]{1,6}){0,3}[.?!]";
        let utt = (
            proptest::collection::vec(sentence, 0..3),
            proptest::collection::vec(any::<(u8, u8)>(), 3),
            proptest::collection::btree_set("[a-z]{2,5}", 0..3),
        );
        (proptest::collection::vec(utt, 1..5), "[a-z ]{0,10}", "[a-z0-9]{1,8}").prop_map(
            |(utts, context, id)| AnnotatedSession {
                session_id: id,
                context,
                utterances: utts
                    .into_iter()
                    .enumerate()
                    .map(|(i, (sentences, labels, words))| {
                        let n = sentences.len();
                        Utterance {
                            speaker: if i % 2 == 0 { Speaker::Human } else { Speaker::Machine },
                            text: sentences.join(" "),
                            annotation: Some(SemanticAnnotation {
                                emotions: (0..n).map(|j| Emotion::ALL[labels[j % 3].0 as usize % 8]).collect(),
                                dialogue_acts: (0..n)
                                    .map(|j| DialogueAct::ALL[labels[j % 3].1 as usize % 4])
                                    .collect(),
                                topical_words: words.into_iter().map(|w| Phrase(vec![w])).collect(),
                            }),
                            sentences,
                        }
                    })
                    .collect(),
            },
        )
    }

    use crate::labels::Label;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn save_load_is_identity(sessions in proptest::collection::vec(arb_session(), 0..4)) {
            let mut sessions = sessions;
            for (i, s) in sessions.iter_mut().enumerate() {
                s.session_id = format!("{}-{i}", s.session_id);
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            save_corpus(&sessions, &path).unwrap();
            let first = fs::read(&path).unwrap();
            let loaded = load_corpus(&path).unwrap();
            prop_assert_eq!(&loaded, &sessions);
            for s in &loaded {
                prop_assert!(s.utterances.iter().enumerate().all(|(i, u)| (u.speaker == Speaker::Human) == (i % 2 == 0)));
            }
            save_corpus(&loaded, &path).unwrap();
            prop_assert_eq!(fs::read(&path).unwrap(), first);
        }
    }
}
