//! Flattening annotated dialogues into one token sequence:
//!
//! ```text
//! context [CLS] | <human> r1 [SEP] s1 s2 <machine> r2 [SEP] | <human> r3 [SEP] s3 s4 ...
//! ```
//!
//! where each `s` is `key value (<list_sep> value)* <eokv>` per semantic
//! variable. Each position carries one of five token types and a loss flag.

mod tokenizer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use tokenizer::{is_special, Special, Tokenizer, NUM_SPECIAL, UNK, UNK_NAME};

use crate::corpus::{Phrase, SemanticAnnotation, TrainingView};
use crate::labels::{DialogueAct, Emotion, Label, Speaker};

pub type TokenId = u32;

#[derive(Debug, thiserror::Error)]
pub enum LinearizeError {
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("a single turn needs {needed} positions but the limit is {limit}")]
    TurnTooLong { needed: usize, limit: usize },
    #[error("utterance {0} is not annotated")]
    Unannotated(usize),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("position {position}: expected a variable key, found `{found}`")]
    ExpectedKey { position: usize, found: String },
    #[error("position {position}: key `{key}` appears twice")]
    RepeatedKey { position: usize, key: &'static str },
    #[error("position {position}: value of `{key}` is not terminated by <eokv>")]
    MissingEokv { position: usize, key: &'static str },
    #[error("position {position}: unexpected special token `{found}` inside a value")]
    UnexpectedSpecial { position: usize, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TokenType {
    HumanUtterance = 0,
    MachineUtterance = 1,
    HumanSemantics = 2,
    MachineSemantics = 3,
    Context = 4,
}

impl TokenType {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn utterance(speaker: Speaker) -> Self {
        match speaker {
            Speaker::Human => TokenType::HumanUtterance,
            Speaker::Machine => TokenType::MachineUtterance,
        }
    }

    pub fn semantics(speaker: Speaker) -> Self {
        match speaker {
            Speaker::Human => TokenType::HumanSemantics,
            Speaker::Machine => TokenType::MachineSemantics,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKey {
    Emotion,
    DialogueAct,
    Topical,
}

impl VariableKey {
    pub const ALL: [VariableKey; 3] = [VariableKey::Emotion, VariableKey::DialogueAct, VariableKey::Topical];

    pub fn special(self) -> Special {
        match self {
            VariableKey::Emotion => Special::Emotion,
            VariableKey::DialogueAct => Special::DialogAct,
            VariableKey::Topical => Special::Topical,
        }
    }

    pub fn from_token(id: TokenId) -> Option<Self> {
        match Special::from_id(id)? {
            Special::Emotion => Some(VariableKey::Emotion),
            Special::DialogAct => Some(VariableKey::DialogueAct),
            Special::Topical => Some(VariableKey::Topical),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        self.special().name()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    DropOldestTurns,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearizationScheme {
    pub variable_order: Vec<VariableKey>,
    pub include_understanding: bool,
    pub include_planning: bool,
    pub max_sequence_length: usize,
    pub truncation: Truncation,
    /// Keep role-switched views whose first utterance belongs to the machine.
    pub keep_machine_opener_views: bool,
}

impl Default for LinearizationScheme {
    fn default() -> Self {
        LinearizationScheme {
            variable_order: VariableKey::ALL.to_vec(),
            include_understanding: true,
            include_planning: true,
            max_sequence_length: 512,
            truncation: Truncation::DropOldestTurns,
            keep_machine_opener_views: true,
        }
    }
}

impl LinearizationScheme {
    pub fn validate(&self) -> Result<(), String> {
        let mut sorted = self.variable_order.clone();
        sorted.sort_by_key(|k| *k as u8);
        if sorted != VariableKey::ALL {
            return Err("variable_order must be a permutation of emotion, dialogue_act, topical".into());
        }
        if self.max_sequence_length < 2 {
            return Err("max_sequence_length is too small".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Context tokens and the closing `[CLS]`.
    Context,
    HumanUtterance,
    Understanding,
    Planning,
    MachineUtterance,
}

/// A contiguous span of the sequence; `utterance` indexes the session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub utterance: Option<usize>,
    pub start: usize,
    pub end: usize,
}

/// Parallel token, type and loss arrays.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinearizedExample {
    pub token_ids: Vec<TokenId>,
    pub token_type_ids: Vec<TokenType>,
    pub loss_mask: Vec<bool>,
    pub turn_boundaries: Vec<Segment>,
}

impl LinearizedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn push(&mut self, id: TokenId, ty: TokenType, loss: bool) {
        self.token_ids.push(id);
        self.token_type_ids.push(ty);
        self.loss_mask.push(loss);
    }

    fn extend(&mut self, other: &LinearizedExample) {
        let offset = self.len();
        self.token_ids.extend_from_slice(&other.token_ids);
        self.token_type_ids.extend_from_slice(&other.token_type_ids);
        self.loss_mask.extend_from_slice(&other.loss_mask);
        self.turn_boundaries.extend(other.turn_boundaries.iter().map(|s| Segment {
            start: s.start + offset,
            end: s.end + offset,
            ..s.clone()
        }));
    }

    fn open(&mut self) -> usize {
        self.len()
    }

    fn close(&mut self, start: usize, kind: SegmentKind, utterance: Option<usize>) {
        self.turn_boundaries.push(Segment { kind, utterance, start, end: self.len() });
    }

    pub fn segments(&self, kind: SegmentKind) -> impl Iterator<Item = &Segment> {
        self.turn_boundaries.iter().filter(move |s| s.kind == kind)
    }

    /// Number of positions that contribute to the loss.
    pub fn supervised_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Value token ids of one variable.
pub fn value_items(ann: &SemanticAnnotation, key: VariableKey, tk: &Tokenizer) -> Vec<Vec<TokenId>> {
    match key {
        VariableKey::Emotion => ann.emotions.iter().map(|&l| vec![tk.label_id(l)]).collect(),
        VariableKey::DialogueAct => ann.dialogue_acts.iter().map(|&l| vec![tk.label_id(l)]).collect(),
        VariableKey::Topical => {
            ann.topical_words.iter().map(|p| p.0.iter().map(|t| tk.content_id(t)).collect()).collect()
        }
    }
}

/// `key value (<list_sep> value)* <eokv>` for every key in scheme order.
/// Keys carry no loss; values, separators and `<eokv>` do.
pub fn linearize_variables(
    ann: &SemanticAnnotation,
    scheme: &LinearizationScheme,
    owner: Speaker,
    tk: &Tokenizer,
) -> LinearizedExample {
    let ty = TokenType::semantics(owner);
    let mut out = LinearizedExample::default();
    for &key in &scheme.variable_order {
        out.push(key.special().id(), ty, false);
        for (i, item) in value_items(ann, key, tk).iter().enumerate() {
            if i > 0 {
                out.push(Special::ListSep.id(), ty, true);
            }
            for &id in item {
                out.push(id, ty, true);
            }
        }
        out.push(Special::Eokv.id(), ty, true);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownItem {
    pub key: VariableKey,
    pub text: String,
}

/// Result of parsing a variable span. Items that are not valid labels are
/// reported in `unknown` and left out of the annotation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedVariables {
    pub annotation: SemanticAnnotation,
    pub unknown: Vec<UnknownItem>,
    pub keys: Vec<VariableKey>,
}

impl ParsedVariables {
    pub fn is_valid(&self) -> bool {
        self.unknown.is_empty()
    }
}

fn parse_label<L: Label>(item: &[TokenId], tk: &Tokenizer) -> Option<L> {
    match item {
        [id] => L::from_name(tk.token(*id)),
        _ => None,
    }
}

/// Inverse of [`linearize_variables`]; accepts keys in any order, each at
/// most once.
pub fn parse_variables(span: &[TokenId], tk: &Tokenizer) -> Result<ParsedVariables, ParseError> {
    let mut out = ParsedVariables::default();
    let mut pos = 0;
    while pos < span.len() {
        let key = VariableKey::from_token(span[pos])
            .ok_or_else(|| ParseError::ExpectedKey { position: pos, found: tk.token(span[pos]).to_string() })?;
        if out.keys.contains(&key) {
            return Err(ParseError::RepeatedKey { position: pos, key: key.name() });
        }
        out.keys.push(key);
        let key_pos = pos;
        pos += 1;
        let mut items: Vec<Vec<TokenId>> = vec![Vec::new()];
        loop {
            let Some(&id) = span.get(pos) else {
                return Err(ParseError::MissingEokv { position: key_pos, key: key.name() });
            };
            pos += 1;
            match Special::from_id(id) {
                Some(Special::Eokv) => break,
                Some(Special::ListSep) => items.push(Vec::new()),
                Some(other) => {
                    return Err(ParseError::UnexpectedSpecial { position: pos - 1, found: other.name().to_string() })
                }
                None => items.last_mut().expect("non-empty").push(id),
            }
        }
        if items.len() == 1 && items[0].is_empty() {
            continue;
        }
        let ann = &mut out.annotation;
        for item in items {
            let ok = match key {
                VariableKey::Emotion => parse_label::<Emotion>(&item, tk).map(|l| ann.emotions.push(l)).is_some(),
                VariableKey::DialogueAct => {
                    parse_label::<DialogueAct>(&item, tk).map(|l| ann.dialogue_acts.push(l)).is_some()
                }
                VariableKey::Topical => {
                    if item.is_empty() {
                        false
                    } else {
                        let phrase = Phrase(item.iter().map(|&i| tk.token(i).to_string()).collect());
                        if !ann.topical_words.contains(&phrase) {
                            ann.topical_words.push(phrase);
                        }
                        true
                    }
                }
            };
            if !ok {
                out.unknown.push(UnknownItem { key, text: tk.render(&item) });
            }
        }
    }
    Ok(out)
}

/// One history item handed to the linearizer.
#[derive(Clone, Copy, Debug)]
pub struct Entry<'a> {
    pub speaker: Speaker,
    pub text: &'a str,
    pub annotation: Option<&'a SemanticAnnotation>,
    pub utterance: usize,
}

fn utterance_tokens(
    out: &mut LinearizedExample,
    entry: &Entry<'_>,
    tk: &Tokenizer,
) {
    let ty = TokenType::utterance(entry.speaker);
    let loss = entry.speaker == Speaker::Machine;
    let marker = match entry.speaker {
        Speaker::Human => Special::Human,
        Speaker::Machine => Special::Machine,
    };
    let start = out.open();
    out.push(marker.id(), ty, false);
    for id in tk.tokenize(entry.text) {
        out.push(id, ty, loss);
    }
    out.push(Special::Sep.id(), ty, loss);
    let kind = match entry.speaker {
        Speaker::Human => SegmentKind::HumanUtterance,
        Speaker::Machine => SegmentKind::MachineUtterance,
    };
    out.close(start, kind, Some(entry.utterance));
}

fn variables_segment(
    out: &mut LinearizedExample,
    entry: &Entry<'_>,
    ann: &SemanticAnnotation,
    scheme: &LinearizationScheme,
    tk: &Tokenizer,
) {
    let span = linearize_variables(ann, scheme, entry.speaker, tk);
    let start = out.open();
    out.token_ids.extend_from_slice(&span.token_ids);
    out.token_type_ids.extend_from_slice(&span.token_type_ids);
    out.loss_mask.extend_from_slice(&span.loss_mask);
    let kind = match entry.speaker {
        Speaker::Human => SegmentKind::Understanding,
        Speaker::Machine => SegmentKind::Planning,
    };
    out.close(start, kind, Some(entry.utterance));
}

/// Tokens of one entry. A human entry is `<human> r [SEP]` followed by its
/// understanding span; a machine entry is its planning span followed by
/// `<machine> r [SEP]`. Spans are skipped when the scheme excludes them or
/// the entry has no annotation.
fn entry_tokens(out: &mut LinearizedExample, entry: &Entry<'_>, scheme: &LinearizationScheme, tk: &Tokenizer) {
    match entry.speaker {
        Speaker::Human => {
            utterance_tokens(out, entry, tk);
            if let (true, Some(ann)) = (scheme.include_understanding, entry.annotation) {
                variables_segment(out, entry, ann, scheme, tk);
            }
        }
        Speaker::Machine => {
            if let (true, Some(ann)) = (scheme.include_planning, entry.annotation) {
                variables_segment(out, entry, ann, scheme, tk);
            }
            utterance_tokens(out, entry, tk);
        }
    }
}

fn context_tokens(context: &str, tk: &Tokenizer) -> LinearizedExample {
    let mut out = LinearizedExample::default();
    let start = out.open();
    for id in tk.tokenize(context) {
        out.push(id, TokenType::Context, false);
    }
    out.push(Special::Cls.id(), TokenType::Context, false);
    out.close(start, SegmentKind::Context, None);
    out
}

/// Groups entries into turns: a human entry opens a turn, a machine entry
/// closes the open turn or forms a machine-only turn.
fn turns<'e, 'a>(entries: &'e [Entry<'a>]) -> Vec<&'e [Entry<'a>]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..entries.len() {
        let closes = entries[i].speaker == Speaker::Machine;
        let next_opens = entries.get(i + 1).is_some_and(|e| e.speaker == Speaker::Human);
        if closes || next_opens || i + 1 == entries.len() {
            out.push(&entries[start..=i]);
            start = i + 1;
        }
    }
    out
}

/// Linearizes `context` and `entries`, dropping the oldest complete turns
/// until the sequence fits in `limit` positions.
pub fn linearize_entries(
    context: &str,
    entries: &[Entry<'_>],
    scheme: &LinearizationScheme,
    tk: &Tokenizer,
    limit: usize,
) -> Result<LinearizedExample, LinearizeError> {
    let ctx = context_tokens(context, tk);
    let mut pieces: Vec<LinearizedExample> = turns(entries)
        .into_iter()
        .map(|turn| {
            let mut t = LinearizedExample::default();
            for e in turn {
                entry_tokens(&mut t, e, scheme, tk);
            }
            t
        })
        .collect();
    let mut total = ctx.len() + pieces.iter().map(LinearizedExample::len).sum::<usize>();
    let mut first = 0;
    while total > limit && first + 1 < pieces.len() {
        total -= pieces[first].len();
        first += 1;
    }
    if total > limit {
        return Err(LinearizeError::TurnTooLong { needed: total, limit });
    }
    let mut out = ctx;
    for p in pieces.drain(first..) {
        out.extend(&p);
    }
    Ok(out)
}

/// Linearizes one training view of a session.
pub fn linearize_session(
    view: &TrainingView<'_>,
    scheme: &LinearizationScheme,
    tk: &Tokenizer,
) -> Result<LinearizedExample, LinearizeError> {
    let entries: Vec<Entry<'_>> = view
        .session()
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let annotation = u.annotation.as_ref().ok_or(LinearizeError::Unannotated(i))?;
            Ok(Entry { speaker: view.speaker(i), text: &u.text, annotation: Some(annotation), utterance: i })
        })
        .collect::<Result<_, LinearizeError>>()?;
    linearize_entries(view.context(), &entries, scheme, tk, scheme.max_sequence_length)
}

/// Both views of every session, honoring `keep_machine_opener_views`.
pub fn training_examples(
    sessions: &[crate::corpus::AnnotatedSession],
    scheme: &LinearizationScheme,
    tk: &Tokenizer,
) -> Result<Vec<LinearizedExample>, LinearizeError> {
    let mut out = Vec::with_capacity(sessions.len() * 2);
    for s in sessions {
        for view in crate::corpus::derive_training_views(s)? {
            if view.machine_opens() && !scheme.keep_machine_opener_views {
                continue;
            }
            out.push(linearize_session(&view, scheme, tk)?);
        }
    }
    Ok(out)
}

/// Everything recoverable from a linearized example: parsed semantic spans
/// and utterance texts, keyed by utterance index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Recovered {
    pub annotations: BTreeMap<usize, SemanticAnnotation>,
    pub utterances: BTreeMap<usize, (Speaker, String)>,
}

pub fn recover(example: &LinearizedExample, tk: &Tokenizer) -> Result<Recovered, ParseError> {
    let mut out = Recovered::default();
    for seg in &example.turn_boundaries {
        let Some(i) = seg.utterance else { continue };
        let ids = &example.token_ids[seg.start..seg.end];
        match seg.kind {
            SegmentKind::Understanding | SegmentKind::Planning => {
                out.annotations.insert(i, parse_variables(ids, tk)?.annotation);
            }
            SegmentKind::HumanUtterance | SegmentKind::MachineUtterance => {
                let speaker =
                    if seg.kind == SegmentKind::HumanUtterance { Speaker::Human } else { Speaker::Machine };
                let body = &ids[1..ids.len() - 1];
                out.utterances.insert(i, (speaker, tk.detokenize(body)));
            }
            SegmentKind::Context => {}
        }
    }
    Ok(out)
}
