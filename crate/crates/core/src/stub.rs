//! Small hand-built [`LanguageModel`]s for exercising the decoder without a
//! trained network.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linearize::{Special, TokenId, TokenType};
use crate::model::{LanguageModel, ModelError};

fn check(ids: &[TokenId], types: &[TokenType], vocab: usize, max: usize) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if ids.len() != types.len() {
        return Err(ModelError::LengthMismatch { ids: ids.len(), types: types.len() });
    }
    if ids.len() >= max {
        return Err(ModelError::PrefixTooLong { len: ids.len(), max });
    }
    match ids.iter().find(|&&t| t as usize >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

/// Model whose next-token distribution is a function of the prefix.
pub struct FnModel<F> {
    pub vocab: usize,
    pub max_positions: usize,
    pub f: F,
}

impl<F: Fn(&[TokenId], &[TokenType]) -> Vec<f64>> LanguageModel for FnModel<F> {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn new_state(&self) {}

    fn next_token_distribution(&self, _: &mut (), ids: &[TokenId], types: &[TokenType]) -> Result<Vec<f64>, ModelError> {
        check(ids, types, self.vocab, self.max_positions)?;
        Ok((self.f)(ids, types))
    }
}

/// The same distribution after every prefix.
pub fn fixed(dist: Vec<f64>, max_positions: usize) -> FnModel<impl Fn(&[TokenId], &[TokenType]) -> Vec<f64>> {
    FnModel { vocab: dist.len(), max_positions, f: move |_: &[TokenId], _: &[TokenType]| dist.clone() }
}

pub fn uniform(vocab: usize, max_positions: usize) -> FnModel<impl Fn(&[TokenId], &[TokenType]) -> Vec<f64>> {
    fixed(vec![1.0 / vocab as f64; vocab], max_positions)
}

/// Pseudo-random distribution seeded by a hash of the prefix, with
/// `stop_mass` spread over `<list_sep>`, `<eokv>` and `[SEP]`.
pub fn hashed(
    vocab: usize,
    max_positions: usize,
    seed: u64,
    stop_mass: f64,
) -> FnModel<impl Fn(&[TokenId], &[TokenType]) -> Vec<f64>> {
    let stops = [Special::ListSep.id(), Special::Eokv.id(), Special::Sep.id()];
    let f = move |ids: &[TokenId], _: &[TokenType]| {
        let mut h = DefaultHasher::new();
        (seed, ids).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut d: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>().powi(4)).collect();
        for &s in &stops {
            d[s as usize] = 0.0;
        }
        let total: f64 = d.iter().sum();
        d.iter_mut().for_each(|p| *p *= (1.0 - stop_mass) / total);
        for &s in &stops {
            d[s as usize] = stop_mass / stops.len() as f64;
        }
        d
    };
    FnModel { vocab, max_positions, f }
}

/// Prefers `word` then `<list_sep>`, so an unconstrained topical span keeps
/// repeating the same phrase.
pub fn repeating(vocab: usize, max_positions: usize, word: TokenId) -> FnModel<impl Fn(&[TokenId], &[TokenType]) -> Vec<f64>> {
    let f = move |ids: &[TokenId], _: &[TokenType]| {
        let mut d = vec![0.1 / vocab as f64; vocab];
        let last = *ids.last().expect("non-empty prefix");
        if last == word {
            d[Special::ListSep.id() as usize] += 0.9;
        } else {
            d[word as usize] += 0.9;
        }
        d
    };
    FnModel { vocab, max_positions, f }
}
