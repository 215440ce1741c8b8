//! Sentence classifiers for dialogue acts and emotions.
//!
//! The bundled backbone is a multinomial logistic regression over a bag of
//! subword features (lower-cased words, word bigrams and character trigrams).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AnnotateError;
use crate::text;

pub trait SentenceClassifier: Send + Sync {
    fn label_set(&self) -> &[String];

    /// Index into [`label_set`](Self::label_set) of the predicted label.
    fn predict_index(&self, sentence: &str) -> usize;

    fn classify(&self, sentences: &[&str]) -> Vec<String> {
        sentences.iter().map(|s| self.label_set()[self.predict_index(s)].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetadata {
    pub backbone: String,
    /// SHA-256 over the training pairs in order.
    pub fingerprint: String,
    pub examples: usize,
    pub train_accuracy: f64,
    /// Held-out accuracy measured elsewhere, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 30, learning_rate: 0.5, l2: 1e-5, seed: 17 }
    }
}

const FORMAT: &str = "dialplan-sentence-classifier";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    format: String,
    version: u32,
    label_set: Vec<String>,
    metadata: ClassifierMetadata,
    features: Vec<String>,
    /// Row-major `[label][feature]`.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    #[serde(skip)]
    feature_index: BTreeMap<String, usize>,
}

fn featurize(sentence: &str) -> BTreeSet<String> {
    let words: Vec<String> = text::pieces(sentence).into_iter().map(|w| w.to_lowercase()).collect();
    let mut out = BTreeSet::new();
    if let Some(first) = words.first() {
        out.insert(format!("f:{first}"));
    }
    if let Some(last) = words.last() {
        out.insert(format!("l:{last}"));
    }
    for w in &words {
        out.insert(format!("w:{w}"));
        let chars: Vec<char> = format!("<{w}>").chars().collect();
        for tri in chars.windows(3) {
            out.insert(format!("c:{}", tri.iter().collect::<String>()));
        }
    }
    for pair in words.windows(2) {
        out.insert(format!("b:{}_{}", pair[0], pair[1]));
    }
    out
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

impl LinearClassifier {
    pub fn metadata(&self) -> &ClassifierMetadata {
        &self.metadata
    }

    pub fn set_reported_accuracy(&mut self, accuracy: Option<f64>) {
        self.metadata.reported_accuracy = accuracy;
    }

    fn feature_ids(&self, sentence: &str) -> Vec<usize> {
        featurize(sentence).iter().filter_map(|f| self.feature_index.get(f).copied()).collect()
    }

    fn scores(&self, ids: &[usize]) -> Vec<f64> {
        let scale = 1.0 / (ids.len().max(1) as f64).sqrt();
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + scale * ids.iter().map(|&i| w[i]).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, sentence: &str) -> Vec<f64> {
        let mut s = self.scores(&self.feature_ids(sentence));
        softmax_in_place(&mut s);
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnnotateError> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).expect("classifier serializes");
        fs::write(path, json).map_err(|e| AnnotateError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnnotateError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| AnnotateError::Io { path: path.to_path_buf(), source: e })?;
        let mut clf: LinearClassifier =
            serde_json::from_str(&raw).map_err(|e| AnnotateError::Format(format!("{}: {e}", path.display())))?;
        if clf.format != FORMAT || clf.version != VERSION {
            return Err(AnnotateError::Format(format!(
                "{}: expected {FORMAT} v{VERSION}, found {} v{}",
                path.display(),
                clf.format,
                clf.version
            )));
        }
        let n_labels = clf.label_set.len();
        if clf.weights.len() != n_labels
            || clf.bias.len() != n_labels
            || clf.weights.iter().any(|w| w.len() != clf.features.len())
        {
            return Err(AnnotateError::Format(format!("{}: parameter shapes do not match", path.display())));
        }
        clf.feature_index = clf.features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        Ok(clf)
    }
}

impl SentenceClassifier for LinearClassifier {
    fn label_set(&self) -> &[String] {
        &self.label_set
    }

    fn predict_index(&self, sentence: &str) -> usize {
        let s = self.scores(&self.feature_ids(sentence));
        // first maximum wins, so ties resolve to the earlier label
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }
}

/// Trains the bundled linear classifier on `(sentence, label)` pairs.
pub fn train_classifier(
    labeled: &[(String, String)],
    label_set: &[String],
    options: &TrainOptions,
) -> Result<LinearClassifier, AnnotateError> {
    if labeled.is_empty() {
        return Err(AnnotateError::EmptyTrainingSet);
    }
    let mut targets = Vec::with_capacity(labeled.len());
    for (_, label) in labeled {
        let idx = label_set
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| AnnotateError::UnknownLabel(label.clone()))?;
        targets.push(idx);
    }
    for (i, l) in label_set.iter().enumerate() {
        if !targets.contains(&i) {
            return Err(AnnotateError::MissingLabel(l.clone()));
        }
    }

    let feature_sets: Vec<BTreeSet<String>> = labeled.iter().map(|(s, _)| featurize(s)).collect();
    let mut vocabulary = BTreeSet::new();
    for fs in &feature_sets {
        vocabulary.extend(fs.iter().cloned());
    }
    let features: Vec<String> = vocabulary.into_iter().collect();
    let feature_index: BTreeMap<String, usize> = features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
    let examples: Vec<Vec<usize>> =
        feature_sets.iter().map(|fs| fs.iter().map(|f| feature_index[f]).collect()).collect();

    let mut hasher = Sha256::new();
    for (s, l) in labeled {
        hasher.update(s.as_bytes());
        hasher.update([0x1f]);
        hasher.update(l.as_bytes());
        hasher.update([0x1e]);
    }
    let fingerprint = crate::hex(&hasher.finalize());

    let n_labels = label_set.len();
    let mut clf = LinearClassifier {
        format: FORMAT.into(),
        version: VERSION,
        label_set: label_set.to_vec(),
        metadata: ClassifierMetadata {
            backbone: "bag-of-subwords-linear".into(),
            fingerprint,
            examples: labeled.len(),
            train_accuracy: 0.0,
            reported_accuracy: None,
        },
        weights: vec![vec![0.0; features.len()]; n_labels],
        bias: vec![0.0; n_labels],
        features,
        feature_index,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let lr = options.learning_rate / (1.0 + epoch as f64 * 0.1);
        for &i in &order {
            let ids = &examples[i];
            let mut p = clf.scores(ids);
            softmax_in_place(&mut p);
            let scale = 1.0 / (ids.len().max(1) as f64).sqrt();
            for (k, pk) in p.iter().enumerate() {
                let g = pk - if k == targets[i] { 1.0 } else { 0.0 };
                clf.bias[k] -= lr * g;
                let row = &mut clf.weights[k];
                for &f in ids {
                    row[f] -= lr * (g * scale + options.l2 * row[f]);
                }
            }
        }
    }

    let correct = examples
        .iter()
        .zip(&targets)
        .filter(|(ids, &t)| {
            let s = clf.scores(ids);
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            best == t
        })
        .count();
    clf.metadata.train_accuracy = correct as f64 / labeled.len() as f64;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(s, l)| (s.to_string(), l.to_string())).collect()
    }

    fn labels(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn separable_classes_are_learned() {
        let mut data = Vec::new();
        for i in 0..40 {
            data.push((format!("do you like item{i}?"), "Question".to_string()));
            data.push((format!("i bought item{i} today."), "Inform".to_string()));
        }
        let clf = train_classifier(&data, &labels(&["Inform", "Question"]), &TrainOptions::default()).unwrap();
        assert!(clf.metadata().train_accuracy >= 0.99, "{}", clf.metadata().train_accuracy);
        assert_eq!(clf.classify(&["do you like pizza?", "i bought pizza today."]), vec!["Question", "Inform"]);
    }

    #[test]
    fn single_label_always_predicted() {
        let clf = train_classifier(&pairs(&[("a", "None"), ("b c", "None")]), &labels(&["None"]), &TrainOptions::default())
            .unwrap();
        assert_eq!(clf.classify(&["anything", "", "b"]), vec!["None", "None", "None"]);
    }

    #[test]
    fn rejects_bad_training_sets() {
        let ls = labels(&["A", "B"]);
        assert!(matches!(
            train_classifier(&pairs(&[("x", "C")]), &ls, &TrainOptions::default()),
            Err(AnnotateError::UnknownLabel(_))
        ));
        assert!(matches!(
            train_classifier(&pairs(&[("x", "A")]), &ls, &TrainOptions::default()),
            Err(AnnotateError::MissingLabel(_))
        ));
        assert!(matches!(train_classifier(&[], &ls, &TrainOptions::default()), Err(AnnotateError::EmptyTrainingSet)));
    }

    #[test]
    fn memorized_sentences_and_batching() {
        let data = pairs(&[
            ("wow that is amazing!", "Surprise"),
            ("i am so happy today.", "Happiness"),
            ("this is terrible, i hate it.", "Anger"),
            ("the meeting is at noon.", "None"),
        ]);
        let ls = labels(&["Surprise", "Happiness", "Anger", "None"]);
        let clf = train_classifier(&data, &ls, &TrainOptions { epochs: 60, ..Default::default() }).unwrap();
        let sentences: Vec<&str> = data.iter().map(|(s, _)| s.as_str()).collect();
        let batch = clf.classify(&sentences);
        for (i, (s, l)) in data.iter().enumerate() {
            assert_eq!(&batch[i], l);
            assert_eq!(clf.classify(&[s.as_str()]), vec![l.clone()]);
        }
        assert!(clf.classify(&[]).is_empty());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = pairs(&[("yes.", "A"), ("no?", "B")]);
        let clf = train_classifier(&data, &labels(&["A", "B"]), &TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        clf.save(&path).unwrap();
        let raw = fs::read_to_string(&path).unwrap();
        assert!(raw.starts_with(r#"{"format":"dialplan-sentence-classifier","version":1,"label_set":["A","B"]"#));
        let back = LinearClassifier::load(&path).unwrap();
        assert_eq!(back.classify(&["yes.", "no?"]), clf.classify(&["yes.", "no?"]));
        assert_eq!(back.metadata(), clf.metadata());
    }
}
