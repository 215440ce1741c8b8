/// Splits utterances at end-of-sentence punctuation.
///
/// A run of terminators (`?!`, `...`) stays attached to the sentence it
/// closes. A period between two ASCII digits is not a terminator. Segments
/// are trimmed, so the input is recovered by re-inserting the whitespace that
/// separated them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceSplitter {
    terminators: Vec<char>,
}

pub const DEFAULT_TERMINATORS: [char; 6] = ['.', '?', '!', '。', '？', '！'];

impl Default for SentenceSplitter {
    fn default() -> Self {
        SentenceSplitter { terminators: DEFAULT_TERMINATORS.to_vec() }
    }
}

impl SentenceSplitter {
    pub fn with_terminators(terminators: impl IntoIterator<Item = char>) -> Self {
        SentenceSplitter { terminators: terminators.into_iter().collect() }
    }

    pub fn terminators(&self) -> &[char] {
        &self.terminators
    }

    fn is_terminator(&self, text: &str, at: usize, c: char) -> bool {
        if !self.terminators.contains(&c) {
            return false;
        }
        if c == '.' {
            let before = text[..at].chars().next_back();
            let after = text[at + 1..].chars().next();
            if let (Some(b), Some(a)) = (before, after) {
                if b.is_ascii_digit() && a.is_ascii_digit() {
                    return false;
                }
            }
        }
        true
    }

    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut in_terminal_run = false;
        for (i, c) in text.char_indices() {
            let term = self.is_terminator(text, i, c);
            if in_terminal_run && !term {
                push_trimmed(&mut out, &text[start..i]);
                start = i;
            }
            in_terminal_run = term;
        }
        push_trimmed(&mut out, &text[start..]);
        out
    }
}

fn push_trimmed<'a>(out: &mut Vec<&'a str>, segment: &'a str) {
    let t = segment.trim();
    if !t.is_empty() {
        out.push(t);
    }
}

/// Splits with the default terminator set.
pub fn split_sentences(text: &str) -> Vec<String> {
    SentenceSplitter::default().split(text).into_iter().map(str::to_string).collect()
}
