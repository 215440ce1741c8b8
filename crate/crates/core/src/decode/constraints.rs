//! Per-step adjustments of the model distribution: structural legality,
//! length forcing and the topical repetition ban.

use std::collections::HashSet;

use super::policy::Bounds;
use crate::labels::{DialogueAct, Emotion, Label};
use crate::linearize::{is_special, Special, TokenId, Tokenizer, VariableKey, UNK};
use crate::text;

const LIST_SEP: TokenId = Special::ListSep.id();
const EOKV: TokenId = Special::Eokv.id();
const SEP: TokenId = Special::Sep.id();

/// Marks the start of a topical phrase in padded n-grams.
const BOUNDARY: Option<TokenId> = None;

fn is_content(id: TokenId) -> bool {
    !is_special(id) && id != UNK
}

/// Tokens that may appear as values of `key`: its labels for emotion and
/// dialogue act; for topical words, any word or CJK character that is not a
/// label, so punctuation never becomes a topic.
pub fn value_vocabulary(tk: &Tokenizer, key: VariableKey) -> Vec<bool> {
    let mut mask = vec![false; tk.vocab_size()];
    let emotions: Vec<TokenId> = Emotion::ALL.iter().map(|&l| tk.label_id(l)).collect();
    let das: Vec<TokenId> = DialogueAct::ALL.iter().map(|&l| tk.label_id(l)).collect();
    for (t, m) in mask.iter_mut().enumerate() {
        let t = t as TokenId;
        *m = match key {
            VariableKey::Emotion => emotions.contains(&t),
            VariableKey::DialogueAct => das.contains(&t),
            VariableKey::Topical => {
                is_content(t) && !emotions.contains(&t) && !das.contains(&t) && text::is_content_piece(tk.token(t))
            }
        };
    }
    mask
}

/// Phrases of a topical value span, each left-padded with `n - 1`
/// boundary markers so that a repeated phrase start is also a repeated
/// n-gram.
fn padded_phrases(span: &[TokenId], n: usize) -> Vec<Vec<Option<TokenId>>> {
    span.split(|&t| t == LIST_SEP)
        .map(|p| std::iter::repeat_n(BOUNDARY, n - 1).chain(p.iter().map(|&t| Some(t))).collect())
        .collect()
}

/// Zeroes every content token that would complete an n-gram already present
/// in `span`, the value tokens emitted so far in this topical span, then
/// renormalizes. `<list_sep>` and `<eokv>` are never suppressed. Returns
/// false, leaving `dist` untouched, when nothing would keep probability.
pub fn apply_repetition_constraint(span: &[TokenId], dist: &mut [f64], n: usize) -> bool {
    if n == 0 || span.is_empty() {
        return true;
    }
    let phrases = padded_phrases(span, n);
    let seen: HashSet<&[Option<TokenId>]> = phrases.iter().flat_map(|p| p.windows(n)).collect();
    let current = phrases.last().expect("split yields a phrase");
    let ctx = &current[current.len() + 1 - n..];
    let mut gram = ctx.to_vec();
    gram.push(None);
    let mut adjusted = dist.to_vec();
    for (t, p) in adjusted.iter_mut().enumerate() {
        let t = t as TokenId;
        if *p == 0.0 || t == LIST_SEP || t == EOKV {
            continue;
        }
        gram[n - 1] = Some(t);
        if seen.contains(gram.as_slice()) {
            *p = 0.0;
        }
    }
    let total: f64 = adjusted.iter().sum();
    if total <= 0.0 {
        return false;
    }
    for (d, a) in dist.iter_mut().zip(adjusted) {
        *d = a / total;
    }
    true
}

/// Number of n-grams in a topical span that repeat an earlier one, using
/// the same phrase padding as the ban.
pub fn repeated_ngrams(span: &[TokenId], n: usize) -> usize {
    let mut seen = HashSet::new();
    let phrases = padded_phrases(span, n);
    phrases.iter().flat_map(|p| p.windows(n)).filter(|g| !seen.insert(*g)).count()
}

/// Whether `t` may follow `emitted` inside a value span whose value
/// tokens are marked in `vocabulary`.
pub fn value_token_legal(t: TokenId, emitted: &[TokenId], bounds: Bounds, vocabulary: &[bool]) -> bool {
    let count = emitted.len();
    let item_open = emitted.last().is_some_and(|&l| l != LIST_SEP);
    match t {
        EOKV => count >= bounds.min && (count == 0 || item_open),
        LIST_SEP => item_open && count + 2 <= bounds.max,
        t => vocabulary.get(t as usize).copied().unwrap_or(false),
    }
}

fn one_hot(len: usize, t: TokenId) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[t as usize] = 1.0;
    v
}

fn renormalize(dist: &mut [f64]) -> bool {
    let total: f64 = dist.iter().sum();
    if total > 0.0 && total.is_finite() {
        dist.iter_mut().for_each(|p| *p /= total);
        true
    } else {
        false
    }
}

fn uniform_over(len: usize, legal: impl Fn(TokenId) -> bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len as TokenId).map(|t| if legal(t) { 1.0 } else { 0.0 }).collect();
    renormalize(&mut v);
    v
}

/// Distribution of the next value-span token. `emitted` holds the value
/// tokens after the key and `vocabulary` marks the admissible values. When
/// the model leaves no mass on legal tokens the step falls back to a
/// uniform choice among them, first honoring the repetition ban and then
/// ignoring it.
pub fn value_step(
    dist: &[f64],
    emitted: &[TokenId],
    bounds: Bounds,
    vocabulary: &[bool],
    repetition: Option<usize>,
) -> Vec<f64> {
    let v = dist.len();
    if emitted.len() >= bounds.max {
        return one_hot(v, EOKV);
    }
    let legal = |t: TokenId| value_token_legal(t, emitted, bounds, vocabulary);
    let mut out: Vec<f64> = dist.iter().enumerate().map(|(t, &p)| if legal(t as TokenId) { p } else { 0.0 }).collect();
    let masked_ok = renormalize(&mut out);
    let banned_ok = match repetition {
        Some(n) if masked_ok => apply_repetition_constraint(emitted, &mut out, n),
        _ => masked_ok,
    };
    if banned_ok {
        return out;
    }
    let mut fallback = uniform_over(v, legal);
    if let Some(n) = repetition {
        apply_repetition_constraint(emitted, &mut fallback, n);
    }
    fallback
}

/// Distribution of the next response token after `count` tokens. Only
/// content tokens and `[SEP]` are legal; `[SEP]` waits for `min` and is
/// forced at `max`.
pub fn response_step(dist: &[f64], count: usize, bounds: Bounds) -> Vec<f64> {
    if count >= bounds.max {
        return one_hot(dist.len(), SEP);
    }
    let legal = |t: TokenId| if t == SEP { count >= bounds.min } else { is_content(t) };
    let mut out: Vec<f64> = dist.iter().enumerate().map(|(t, &p)| if legal(t as TokenId) { p } else { 0.0 }).collect();
    if renormalize(&mut out) {
        out
    } else {
        uniform_over(dist.len(), legal)
    }
}
