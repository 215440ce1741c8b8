use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DecodeError;
use crate::linearize::VariableKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    TopkTopp,
}

/// Inclusive bounds on a number of generated tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: usize,
    pub max: usize,
}

impl Bounds {
    pub const fn new(min: usize, max: usize) -> Self {
        Bounds { min, max }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionConstraint {
    pub enabled: bool,
    pub n: usize,
}

/// Sampling and length settings of one stage. Value spans are bounded per
/// key in value tokens (list separators included, key and `<eokv>`
/// excluded); the response is bounded in tokens before `[SEP]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePolicy {
    pub sampling: Sampling,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub emotion: Bounds,
    pub dialogue_act: Bounds,
    pub topical: Bounds,
    pub response: Bounds,
    pub repetition_constraint: RepetitionConstraint,
}

impl StagePolicy {
    pub fn greedy() -> Self {
        StagePolicy {
            sampling: Sampling::Greedy,
            top_k: 50,
            top_p: 0.9,
            temperature: 1.0,
            emotion: Bounds::new(0, 10),
            dialogue_act: Bounds::new(0, 10),
            topical: Bounds::new(0, 20),
            response: Bounds::new(0, 32),
            repetition_constraint: RepetitionConstraint { enabled: false, n: 2 },
        }
    }

    pub fn bounds(&self, key: VariableKey) -> Bounds {
        match key {
            VariableKey::Emotion => self.emotion,
            VariableKey::DialogueAct => self.dialogue_act,
            VariableKey::Topical => self.topical,
        }
    }

    fn validate(&self, stage: &str) -> Result<(), DecodeError> {
        let fail = |m: String| Err(DecodeError::InvalidPolicy(format!("{stage}: {m}")));
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail(format!("top_p {} is outside (0, 1]", self.top_p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.top_k == 0 {
            return fail("top_k must be positive".into());
        }
        for (name, b) in [
            ("emotion", self.emotion),
            ("dialogue_act", self.dialogue_act),
            ("topical", self.topical),
            ("response", self.response),
        ] {
            if b.min > b.max {
                return fail(format!("{name} min {} exceeds max {}", b.min, b.max));
            }
            if b.max == 0 && name == "response" {
                return fail("response max must be positive".into());
            }
        }
        if self.repetition_constraint.n == 0 {
            return fail("repetition n must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingPolicy {
    pub understanding: StagePolicy,
    pub planning: StagePolicy,
    pub response: StagePolicy,
    pub use_understanding: bool,
    pub use_planning: bool,
}

impl Default for DecodingPolicy {
    fn default() -> Self {
        DecodingPolicy {
            understanding: StagePolicy::greedy(),
            planning: StagePolicy {
                topical: Bounds::new(5, 20),
                repetition_constraint: RepetitionConstraint { enabled: true, n: 2 },
                ..StagePolicy::greedy()
            },
            response: StagePolicy {
                sampling: Sampling::TopkTopp,
                top_k: 50,
                top_p: 0.9,
                temperature: 0.7,
                response: Bounds::new(9, 32),
                ..StagePolicy::greedy()
            },
            use_understanding: true,
            use_planning: true,
        }
    }
}

impl DecodingPolicy {
    pub fn validate(&self) -> Result<(), DecodeError> {
        self.understanding.validate("understanding")?;
        self.planning.validate("planning")?;
        self.response.validate("response")
    }

    pub fn from_json(s: &str) -> Result<Self, DecodeError> {
        let p: DecodingPolicy = serde_json::from_str(s).map_err(|e| DecodeError::InvalidPolicy(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DecodeError> {
        let s = std::fs::read_to_string(path.as_ref())
            .map_err(|e| DecodeError::InvalidPolicy(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    /// Longest possible span a stage can append: keys, values and `<eokv>`
    /// for the variable stages, marker, tokens and `[SEP]` for the response.
    pub fn generation_reserve(&self) -> usize {
        let vars = |s: &StagePolicy| {
            VariableKey::ALL.iter().map(|&k| s.bounds(k).max + 2).sum::<usize>()
        };
        let mut total = self.response.response.max + 2;
        if self.use_understanding {
            total += vars(&self.understanding);
        }
        if self.use_planning {
            total += vars(&self.planning);
        }
        total
    }
}
