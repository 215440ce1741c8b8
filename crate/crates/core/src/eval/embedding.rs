use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::text;

/// Splits a sentence into the phrases looked up in an [`EmbeddingTable`].
pub trait Segmenter: Send + Sync {
    fn segment(&self, text: &str) -> Vec<String>;
}

/// Words and single CJK characters; punctuation is dropped.
#[derive(Clone, Copy, Debug, Default)]
pub struct PieceSegmenter;

impl Segmenter for PieceSegmenter {
    fn segment(&self, text: &str) -> Vec<String> {
        text::pieces(text).into_iter().filter(|p| text::is_content_piece(p)).map(str::to_string).collect()
    }
}

/// Phrase vectors of one dimension. Unknown phrases count as zero vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, vectors: HashMap::new() }
    }

    /// Gaussian vectors for `phrases`, reproducible from `seed`.
    pub fn random<'a>(phrases: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = EmbeddingTable::new(dim);
        for p in phrases {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            t.vectors.entry(p.to_string()).or_insert(v);
        }
        t
    }

    pub fn insert(&mut self, phrase: impl Into<String>, vector: Vec<f64>) -> Result<(), EvalError> {
        if vector.len() != self.dim {
            return Err(EvalError::Embedding(format!("vector of length {} in a table of dimension {}", vector.len(), self.dim)));
        }
        self.vectors.insert(phrase.into(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, phrase: &str) -> Option<&[f64]> {
        self.vectors.get(phrase).map(Vec::as_slice)
    }

    /// Text format: one phrase per line, a tab, then space-separated
    /// components.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| EvalError::Embedding(format!("{}: {e}", path.display())))?;
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || EvalError::Embedding(format!("{}:{}: expected `phrase<TAB>numbers`", path.display(), i + 1));
            let (phrase, nums) = line.split_once('\t').ok_or_else(bad)?;
            let v = nums.split_whitespace().map(str::parse).collect::<Result<Vec<f64>, _>>().map_err(|_| bad())?;
            table.get_or_insert_with(|| EmbeddingTable::new(v.len())).insert(phrase, v)?;
        }
        table.ok_or_else(|| EvalError::Embedding(format!("{}: no vectors", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let nums: Vec<String> = self.vectors[k].iter().map(|x| x.to_string()).collect();
            out.push_str(&format!("{k}\t{}\n", nums.join(" ")));
        }
        std::fs::write(path.as_ref(), out).map_err(|e| EvalError::Embedding(format!("{}: {e}", path.as_ref().display())))
    }

    fn vectors_of(&self, phrases: &[String]) -> Vec<Vec<f64>> {
        phrases.iter().map(|p| self.get(p).map_or_else(|| vec![0.0; self.dim], <[f64]>::to_vec)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extreme: f64,
    /// Set when a side had no known phrase; both scores are then 0.
    pub all_oov: bool,
}

fn cosine01(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    // sqrt(aa * bb) equals dot exactly when a == b, so identity scores 1.0
    Some(((1.0 + dot / (aa * bb).sqrt()) / 2.0).clamp(0.0, 1.0))
}

fn mean(vs: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for v in vs {
        m.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    if !vs.is_empty() {
        m.iter_mut().for_each(|a| *a /= vs.len() as f64);
    }
    m
}

/// Per dimension, the component of largest magnitude.
fn extreme(vs: &[Vec<f64>], dim: usize) -> Vec<f64> {
    (0..dim).map(|d| vs.iter().map(|v| v[d]).fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best })).collect()
}

/// Embedding-Average and Embedding-Extreme, mapped from cosine to [0, 1].
pub fn embedding_metrics(hypothesis: &str, reference: &str, table: &EmbeddingTable, segmenter: &dyn Segmenter) -> EmbeddingScores {
    let h = table.vectors_of(&segmenter.segment(hypothesis));
    let r = table.vectors_of(&segmenter.segment(reference));
    let d = table.dim();
    match (cosine01(&mean(&h, d), &mean(&r, d)), cosine01(&extreme(&h, d), &extreme(&r, d))) {
        (Some(average), Some(extreme)) => EmbeddingScores { average, extreme, all_oov: false },
        _ => EmbeddingScores { average: 0.0, extreme: 0.0, all_oov: true },
    }
}
