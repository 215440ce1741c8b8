//! Vocabulary and tokenizer.
//!
//! Ids `0..9` are the reserved special tokens, id 9 is `<unk>`, the next
//! twelve ids are the dialogue-act and emotion label names, and content
//! tokens follow by descending corpus frequency (ties lexicographic).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LinearizeError, TokenId};
use crate::corpus::AnnotatedSession;
use crate::labels::{DialogueAct, Emotion, Label};
use crate::text;

/// Reserved tokens of the linearized format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Special {
    Topical = 0,
    Emotion = 1,
    DialogAct = 2,
    ListSep = 3,
    Eokv = 4,
    Cls = 5,
    Human = 6,
    Machine = 7,
    Sep = 8,
}

impl Special {
    pub const ALL: [Special; 9] = [
        Special::Topical,
        Special::Emotion,
        Special::DialogAct,
        Special::ListSep,
        Special::Eokv,
        Special::Cls,
        Special::Human,
        Special::Machine,
        Special::Sep,
    ];

    pub const fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Topical => "<topical>",
            Special::Emotion => "<emotion>",
            Special::DialogAct => "<dialog_act>",
            Special::ListSep => "<list_sep>",
            Special::Eokv => "<eokv>",
            Special::Cls => "[CLS]",
            Special::Human => "<human>",
            Special::Machine => "<machine>",
            Special::Sep => "[SEP]",
        }
    }

    pub fn from_id(id: TokenId) -> Option<Special> {
        Special::ALL.get(id as usize).copied()
    }
}

pub const NUM_SPECIAL: usize = 9;
pub const UNK: TokenId = 9;
pub const UNK_NAME: &str = "<unk>";

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    fingerprint: String,
}

fn reserved_tokens() -> Vec<String> {
    let mut v: Vec<String> = Special::ALL.iter().map(|s| s.name().to_string()).collect();
    v.push(UNK_NAME.to_string());
    v.extend(DialogueAct::ALL.iter().map(|l| l.name().to_string()));
    v.extend(Emotion::ALL.iter().map(|l| l.name().to_string()));
    v
}

impl Tokenizer {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, LinearizeError> {
        for (i, s) in Special::ALL.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(s.name()) {
                return Err(LinearizeError::Vocabulary(format!(
                    "line {} must be the reserved token {}",
                    i + 1,
                    s.name()
                )));
            }
        }
        if tokens.get(UNK as usize).map(String::as_str) != Some(UNK_NAME) {
            return Err(LinearizeError::Vocabulary(format!("line {} must be {UNK_NAME}", UNK + 1)));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(LinearizeError::Vocabulary(format!("line {}: invalid token {t:?}", i + 1)));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(LinearizeError::Vocabulary(format!("line {}: duplicate token {t:?}", i + 1)));
            }
        }
        let mut tk = Tokenizer { tokens, index, fingerprint: String::new() };
        tk.fingerprint = crate::hex(&Sha256::digest(tk.to_text().as_bytes()));
        Ok(tk)
    }

    /// Builds a vocabulary over the pieces of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in texts {
            for p in text::pieces(t) {
                *counts.entry(p.to_string()).or_default() += 1;
            }
        }
        let mut tokens = reserved_tokens();
        let mut content: Vec<(String, u64)> =
            counts.into_iter().filter(|(t, _)| !tokens.contains(t)).collect();
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        tokens.extend(content.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Vocabulary over contexts, utterance texts and topical phrases.
    pub fn from_corpus(sessions: &[AnnotatedSession]) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        for s in sessions {
            texts.push(&s.context);
            for u in &s.utterances {
                texts.push(&u.text);
                if let Some(a) = &u.annotation {
                    for p in &a.topical_words {
                        texts.extend(p.0.iter().map(String::as_str));
                    }
                }
            }
        }
        Self::build(texts)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK_NAME, String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a content token; special-token names and unknown pieces map to `<unk>`.
    pub fn content_id(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) if !is_special(id) => id,
            _ => UNK,
        }
    }

    pub fn label_id<L: Label>(&self, label: L) -> TokenId {
        self.content_id(label.name())
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text::pieces(text).into_iter().map(|p| self.content_id(p)).collect()
    }

    /// Canonical text of the ids. Special tokens are rendered by name.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let pieces: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        text::join(&pieces)
    }

    /// Space-separated token strings, for traces and debugging.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Token-per-line vocabulary file; the first nine lines are the
    /// reserved special tokens.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(s: &str) -> Result<Self, LinearizeError> {
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Self, LinearizeError> {
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LinearizeError> {
        fs::write(path.as_ref(), self.to_text()).map_err(|e| LinearizeError::Vocabulary(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LinearizeError> {
        let s = fs::read_to_string(path.as_ref()).map_err(|e| LinearizeError::Vocabulary(e.to_string()))?;
        Self::from_text(&s)
    }
}
