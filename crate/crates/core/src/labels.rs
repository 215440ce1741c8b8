//! Closed label sets for speakers, dialogue acts and emotions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Who produced an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Machine,
}

impl Speaker {
    pub fn flip(self) -> Self {
        match self {
            Speaker::Human => Speaker::Machine,
            Speaker::Machine => Speaker::Human,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::Human => "human",
            Speaker::Machine => "machine",
        })
    }
}

/// A label drawn from a fixed, ordered vocabulary.
pub trait Label: Copy + Eq + std::hash::Hash + fmt::Debug + 'static {
    const ALL: &'static [Self];
    fn name(self) -> &'static str;

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).expect("label in ALL")
    }
}

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl Label for $name {
            const ALL: &'static [Self] = &[$($name::$variant),+];

            fn name(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($variant)),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = UnknownLabel;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                <$name as Label>::from_name(s).ok_or_else(|| UnknownLabel(s.to_string()))
            }
        }
    };
}

label_enum!(
    /// DailyDialog-style dialogue act of a sentence.
    DialogueAct { Inform, Question, Directive, Commissive }
);

label_enum!(
    /// Sentence-level emotion; `None` marks sentences without an obvious emotion.
    Emotion { Fear, Surprise, Anger, Disgust, Like, Happiness, Sadness, None }
);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label `{0}`")]
pub struct UnknownLabel(pub String);
