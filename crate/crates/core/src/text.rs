//! Pre-tokenization into pieces and canonical re-joining.
//!
//! A piece is one CJK character, one run of word characters, or one other
//! non-space character. Whitespace is not kept; [`join`] reinserts single
//! spaces using fixed rules, so `join(pieces(x))` is the canonical spelling
//! of `x`.

/// Coarse class of a piece, used for spacing decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PieceClass {
    Cjk,
    Word,
    Open,
    Close,
    Other,
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F   // CJK symbols and punctuation
        | 0x3040..=0x30FF // kana
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF // hangul
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF // full-width forms
        | 0x20000..=0x2FA1F)
}

fn is_word_char(c: char) -> bool {
    !is_cjk(c) && (c.is_alphanumeric() || c == '\'' || c == '_')
}

pub fn classify(piece: &str) -> PieceClass {
    let c = match piece.chars().next() {
        Some(c) => c,
        None => return PieceClass::Other,
    };
    if is_cjk(c) {
        PieceClass::Cjk
    } else if is_word_char(c) {
        PieceClass::Word
    } else if "([{¿¡“‘".contains(c) {
        PieceClass::Open
    } else if ".,!?;:)]}%…”’".contains(c) {
        PieceClass::Close
    } else {
        PieceClass::Other
    }
}

/// Splits text into pieces (borrowed slices of the input).
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = word_start {
        out.push(&text[s..]);
    }
    out
}

fn needs_space(prev: PieceClass, next: PieceClass) -> bool {
    use PieceClass::*;
    match (prev, next) {
        (Cjk, _) | (_, Cjk) => false,
        (Word, Word) | (Word, Open) => true,
        (Close, Word) | (Close, Open) => true,
        _ => false,
    }
}

/// Joins pieces with canonical spacing.
pub fn join<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<PieceClass> = None;
    for p in pieces {
        let p = p.as_ref();
        if p.is_empty() {
            continue;
        }
        let class = classify(p);
        if let Some(prev) = prev {
            if needs_space(prev, class) {
                out.push(' ');
            }
        }
        out.push_str(p);
        prev = Some(class);
    }
    out
}

/// Canonical spelling of `text`.
pub fn canonicalize(text: &str) -> String {
    join(&pieces(text))
}

/// Pieces that can carry topical meaning (words and CJK characters that are
/// not punctuation).
pub fn is_content_piece(piece: &str) -> bool {
    match classify(piece) {
        PieceClass::Word => true,
        PieceClass::Cjk => piece.chars().all(|c| c.is_alphanumeric()),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_words_punctuation_and_cjk() {
        assert_eq!(pieces("Fine. You?"), vec!["Fine", ".", "You", "?"]);
        assert_eq!(pieces("我喜欢KC乐队！"), vec!["我", "喜", "欢", "KC", "乐", "队", "！"]);
        assert_eq!(pieces("don't  stop"), vec!["don't", "stop"]);
        assert!(pieces("   ").is_empty());
    }

    #[test]
    fn canonical_spacing() {
        assert_eq!(canonicalize("Fine .  You ?"), "Fine. You?");
        assert_eq!(canonicalize("wow , do you like (rock)?"), "wow, do you like (rock)?");
        assert_eq!(canonicalize("我 喜欢 音乐。"), "我喜欢音乐。");
        assert_eq!(canonicalize("<topical>"), "<topical>");
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(s in "[a-z ,.?!()<>\\-我你好。？]{0,40}") {
            let once = canonicalize(&s);
            prop_assert_eq!(canonicalize(&once), once.clone());
            prop_assert_eq!(pieces(&once), pieces(&s));
        }
    }
}
