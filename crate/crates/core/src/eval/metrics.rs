use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::Phrase;
use crate::labels::Label;
use crate::text;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuUnit {
    /// Every non-whitespace character.
    Char,
    /// Text pieces: words, single CJK characters and punctuation marks.
    #[default]
    Word,
}

pub fn units(text: &str, unit: BleuUnit) -> Vec<String> {
    match unit {
        BleuUnit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        BleuUnit::Word => text::pieces(text).into_iter().map(str::to_string).collect(),
    }
}

fn ngram_counts<S: AsRef<str> + Eq + std::hash::Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence-level BLEU-n with uniform weights over orders 1..=n, a brevity
/// penalty, and add-one smoothing on the precisions of orders above one.
pub fn bleu_n<S: AsRef<str> + Eq + std::hash::Hash>(hypothesis: &[S], reference: &[S], n: usize) -> f64 {
    if hypothesis.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let hyp = ngram_counts(hypothesis, k);
        let refc = ngram_counts(reference, k);
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        let total = hypothesis.len().saturating_sub(k - 1);
        let p = if k == 1 { matched as f64 / total as f64 } else { (matched + 1) as f64 / (total + 1) as f64 };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Distinct n-grams over all n-grams of the hypotheses, pooled. N-grams do
/// not cross hypothesis boundaries.
pub fn dist_n<S: AsRef<str> + Eq + std::hash::Hash>(hypotheses: &[Vec<S>], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0;
    for h in hypotheses {
        for g in h.windows(n.max(1)) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

fn contains_phrase(tokens: &[&str], phrase: &Phrase) -> bool {
    let p = phrase.tokens();
    !p.is_empty() && tokens.windows(p.len()).any(|w| w.iter().zip(p).all(|(a, b)| *a == b))
}

/// Share of gold phrases found in the response, or `None` without gold.
pub fn topical_recall(response: &str, gold: &[Phrase]) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let tokens = text::pieces(response);
    let hits = gold.iter().filter(|p| contains_phrase(&tokens, p)).count();
    Some(hits as f64 / gold.len() as f64)
}

/// F1 over label presence, per label, averaged with weights equal to the
/// number of samples whose gold list contains the label.
pub fn label_f1<L: Label>(pred: &[Vec<L>], gold: &[Vec<L>]) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), gold: gold.len() });
    }
    let mut weighted = 0.0;
    let mut weights = 0usize;
    for &label in L::ALL {
        let (mut tp, mut fp, mut fn_, mut support) = (0usize, 0usize, 0usize, 0usize);
        for (p, g) in pred.iter().zip(gold) {
            let (in_p, in_g) = (p.contains(&label), g.contains(&label));
            support += in_g as usize;
            tp += (in_p && in_g) as usize;
            fp += (in_p && !in_g) as usize;
            fn_ += (!in_p && in_g) as usize;
        }
        if support > 0 {
            weighted += support as f64 * (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
            weights += support;
        }
    }
    if weights == 0 {
        return Err(EvalError::EmptyGold);
    }
    Ok(weighted / weights as f64)
}

/// Set F1 of one sample; two empty sets match perfectly.
pub fn set_f1(pred: &[Phrase], gold: &[Phrase]) -> f64 {
    let p: HashSet<&Phrase> = pred.iter().collect();
    let g: HashSet<&Phrase> = gold.iter().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let tp = p.intersection(&g).count();
    (2 * tp) as f64 / (p.len() + g.len()) as f64
}

/// Mean per-sample set F1.
pub fn topical_f1(pred: &[Vec<Phrase>], gold: &[Vec<Phrase>]) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), gold: gold.len() });
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(pred.iter().zip(gold).map(|(p, g)| set_f1(p, g)).sum::<f64>() / gold.len() as f64)
}
