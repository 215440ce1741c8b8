//! Topical-word vocabulary: extraction, ranking and alignment to utterances.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnnotateError;
use crate::corpus::{AnnotatedSession, Phrase};
use crate::text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPhrase {
    pub phrase: Phrase,
    pub score: f64,
}

/// Ranked topical phrases, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopicalVocabulary {
    phrases: Vec<ScoredPhrase>,
    size_limit: usize,
    index: HashMap<Phrase, usize>,
    max_phrase_tokens: usize,
}

impl TopicalVocabulary {
    /// Builds a vocabulary from already ranked phrases, keeping the first
    /// `size_limit` distinct ones.
    pub fn from_ranked(ranked: impl IntoIterator<Item = ScoredPhrase>, size_limit: usize) -> Result<Self, AnnotateError> {
        if size_limit == 0 {
            return Err(AnnotateError::InvalidSizeLimit);
        }
        let mut vocab = TopicalVocabulary { size_limit, ..Default::default() };
        for sp in ranked {
            if vocab.phrases.len() == size_limit {
                break;
            }
            if sp.phrase.is_empty() || vocab.index.contains_key(&sp.phrase) {
                continue;
            }
            if let Some(last) = vocab.phrases.last() {
                if sp.score > last.score {
                    return Err(AnnotateError::Format("topical vocabulary scores must be non-increasing".into()));
                }
            }
            vocab.max_phrase_tokens = vocab.max_phrase_tokens.max(sp.phrase.0.len());
            vocab.index.insert(sp.phrase.clone(), vocab.phrases.len());
            vocab.phrases.push(sp);
        }
        Ok(vocab)
    }

    /// Vocabulary of the given phrases with equal scores, in the given order.
    pub fn from_phrases(phrases: impl IntoIterator<Item = Phrase>) -> Self {
        let ranked: Vec<_> = phrases.into_iter().map(|phrase| ScoredPhrase { phrase, score: 1.0 }).collect();
        let n = ranked.len().max(1);
        Self::from_ranked(ranked, n).expect("non-zero limit")
    }

    pub fn phrases(&self) -> &[ScoredPhrase] {
        &self.phrases
    }

    pub fn size_limit(&self) -> usize {
        self.size_limit
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn contains(&self, phrase: &[String]) -> bool {
        // HashMap<Phrase, _> cannot be queried by slice without allocating.
        self.index.contains_key(&Phrase(phrase.to_vec()))
    }

    /// One `tokens<TAB>score` line per phrase; tokens are space separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for sp in &self.phrases {
            out.push_str(&sp.phrase.0.join(" "));
            out.push('\t');
            out.push_str(&sp.score.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(s: &str) -> Result<Self, AnnotateError> {
        let mut ranked = Vec::new();
        for (i, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (phrase, score) = line
                .rsplit_once('\t')
                .ok_or_else(|| AnnotateError::Format(format!("line {}: expected `phrase<TAB>score`", i + 1)))?;
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| AnnotateError::Format(format!("line {}: bad score `{score}`", i + 1)))?;
            let tokens = phrase.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
            ranked.push(ScoredPhrase { phrase: Phrase(tokens), score });
        }
        let n = ranked.len().max(1);
        Self::from_ranked(ranked, n)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnnotateError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| AnnotateError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnnotateError> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| AnnotateError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_text(&s)
    }

    /// Vocabulary phrases occurring in `text` at token boundaries,
    /// deduplicated, in order of first occurrence. At one position longer
    /// phrases come first.
    pub fn align(&self, text: &str) -> Vec<Phrase> {
        let tokens: Vec<String> = text::pieces(text).into_iter().map(str::to_string).collect();
        self.align_tokens(&tokens)
    }

    pub fn align_tokens(&self, tokens: &[String]) -> Vec<Phrase> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for start in 0..tokens.len() {
            let longest = self.max_phrase_tokens.min(tokens.len() - start);
            for len in (1..=longest).rev() {
                let candidate = &tokens[start..start + len];
                if self.contains(candidate) && seen.insert(candidate.to_vec()) {
                    out.push(Phrase(candidate.to_vec()));
                }
            }
        }
        out
    }
}

/// Source of topical vocabularies; alternative extractors plug in here.
pub trait TopicalExtractor {
    fn extract(&self, sessions: &[AnnotatedSession], size_limit: usize) -> Result<TopicalVocabulary, AnnotateError>;
}

/// Ranks candidate phrases by utterance document frequency times an
/// inverse background frequency. Without a background table every phrase
/// has weight one and the ranking is by document frequency alone.
#[derive(Clone, Debug, Default)]
pub struct SalienceExtractor {
    pub max_phrase_tokens: usize,
    pub stoplist: HashSet<String>,
    pub background: Option<BackgroundFrequencies>,
}

/// Phrase counts from a reference corpus.
#[derive(Clone, Debug, Default)]
pub struct BackgroundFrequencies {
    pub counts: HashMap<Phrase, u64>,
    pub total: u64,
}

impl BackgroundFrequencies {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_phrase_tokens: usize) -> Self {
        let mut bg = BackgroundFrequencies::default();
        for t in texts {
            let toks: Vec<&str> = text::pieces(t);
            for len in 1..=max_phrase_tokens.max(1) {
                for w in toks.windows(len) {
                    *bg.counts.entry(Phrase(w.iter().map(|s| s.to_string()).collect())).or_default() += 1;
                    bg.total += 1;
                }
            }
        }
        bg
    }

    fn weight(&self, p: &Phrase) -> f64 {
        let c = self.counts.get(p).copied().unwrap_or(0);
        ((1 + self.total) as f64 / (1 + c) as f64).ln()
    }
}

impl SalienceExtractor {
    pub fn new(stoplist: impl IntoIterator<Item = String>) -> Self {
        SalienceExtractor { max_phrase_tokens: 1, stoplist: stoplist.into_iter().collect(), background: None }
    }

    fn candidate(&self, tokens: &[&str]) -> bool {
        let first = tokens[0];
        let last = tokens[tokens.len() - 1];
        tokens.iter().all(|t| text::is_content_piece(t))
            && !self.stoplist.contains(first)
            && !self.stoplist.contains(last)
    }
}

impl TopicalExtractor for SalienceExtractor {
    fn extract(&self, sessions: &[AnnotatedSession], size_limit: usize) -> Result<TopicalVocabulary, AnnotateError> {
        if size_limit == 0 {
            return Err(AnnotateError::InvalidSizeLimit);
        }
        let mut df: BTreeMap<Phrase, u64> = BTreeMap::new();
        for u in sessions.iter().flat_map(|s| &s.utterances) {
            let toks = text::pieces(&u.text);
            let mut in_doc = HashSet::new();
            for len in 1..=self.max_phrase_tokens.max(1) {
                for w in toks.windows(len) {
                    if self.candidate(w) {
                        in_doc.insert(w);
                    }
                }
            }
            for w in in_doc {
                *df.entry(Phrase(w.iter().map(|s| s.to_string()).collect())).or_default() += 1;
            }
        }
        let mut ranked: Vec<ScoredPhrase> = df
            .into_iter()
            .map(|(phrase, count)| {
                let w = self.background.as_ref().map_or(1.0, |bg| bg.weight(&phrase));
                ScoredPhrase { score: count as f64 * w, phrase }
            })
            .filter(|sp| sp.score > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.phrase.cmp(&b.phrase)));
        TopicalVocabulary::from_ranked(ranked, size_limit)
    }
}

/// Builds a vocabulary with the default salience extractor.
pub fn build_topical_vocabulary(
    sessions: &[AnnotatedSession],
    size_limit: usize,
    stoplist: impl IntoIterator<Item = String>,
) -> Result<TopicalVocabulary, AnnotateError> {
    SalienceExtractor::new(stoplist).extract(sessions, size_limit)
}
