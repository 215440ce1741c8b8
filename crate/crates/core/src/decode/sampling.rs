use rand::Rng;

use super::policy::{Sampling, StagePolicy};
use crate::linearize::TokenId;

/// Index of the largest probability, lowest id on ties.
pub fn argmax(dist: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Candidate ids and their renormalized probabilities after temperature,
/// top-k and top-p. The candidate set is the intersection of the two
/// nuclei, which for a sorted list is the shorter prefix.
pub fn truncated_distribution(dist: &[f64], k: usize, p: f64, temperature: f64) -> Vec<(TokenId, f64)> {
    let mut cands: Vec<(TokenId, f64)> =
        dist.iter().enumerate().filter(|(_, &q)| q > 0.0).map(|(i, &q)| (i as TokenId, q.ln() / temperature)).collect();
    if cands.is_empty() {
        return Vec::new();
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = cands[0].1;
    let mut total = 0.0;
    for c in cands.iter_mut() {
        c.1 = (c.1 - top).exp();
        total += c.1;
    }
    let mut cum = 0.0;
    let mut nucleus = cands.len();
    for (i, c) in cands.iter().enumerate() {
        cum += c.1 / total;
        if cum >= p - 1e-12 {
            nucleus = i + 1;
            break;
        }
    }
    cands.truncate(nucleus.min(k).max(1));
    let kept: f64 = cands.iter().map(|c| c.1).sum();
    cands.iter_mut().for_each(|c| c.1 /= kept);
    cands
}

/// Draws the next token from a normalized distribution.
pub fn sample_token<R: Rng + ?Sized>(dist: &[f64], policy: &StagePolicy, rng: &mut R) -> TokenId {
    match policy.sampling {
        Sampling::Greedy => argmax(dist),
        Sampling::TopkTopp => {
            let cands = truncated_distribution(dist, policy.top_k, policy.top_p, policy.temperature);
            let Some(last) = cands.last() else { return argmax(dist) };
            let mut u: f64 = rng.random();
            for &(id, q) in &cands {
                if u < q {
                    return id;
                }
                u -= q;
            }
            last.0
        }
    }
}
