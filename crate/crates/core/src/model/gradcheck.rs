//! Finite-difference verification of the hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{ModelConfig, ModelError, Transformer};
use crate::linearize::{TokenId, TokenType};

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    /// `|a - n| / (|a| + |n|)` over the whole tensor.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares analytic gradients of the masked loss with central differences
/// on a random sequence, in double precision. Parameters are jittered away
/// from their initial values so that gains and biases are exercised.
pub fn gradient_check(config: &ModelConfig, seq_len: usize, seed: u64) -> Result<Vec<TensorCheck>, ModelError> {
    let mut model = Transformer::<f64>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.2).expect("finite");
    for p in model.params_mut() {
        *p += jitter.sample(&mut rng);
    }
    let v = config.vocab_size as TokenId;
    let inputs: Vec<TokenId> = (0..seq_len).map(|_| rng.random_range(0..v)).collect();
    let targets: Vec<TokenId> = (0..seq_len).map(|_| rng.random_range(0..v)).collect();
    let types: Vec<TokenType> = (0..seq_len)
        .map(|_| {
            [
                TokenType::HumanUtterance,
                TokenType::MachineUtterance,
                TokenType::HumanSemantics,
                TokenType::MachineSemantics,
                TokenType::Context,
            ][rng.random_range(0..TokenType::COUNT)]
        })
        .collect();
    let mut weights: Vec<bool> = (0..seq_len).map(|_| rng.random_bool(0.6)).collect();
    weights[seq_len - 1] = true;

    let mut analytic = vec![0.0; model.num_params()];
    model.loss_and_grad(&inputs, &types, &targets, &weights, 1.0, &mut analytic, None::<&mut ChaCha8Rng>)?;

    let h = 1e-5;
    let specs = model.tensor_specs().to_vec();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in spec.offset..spec.offset + spec.len() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let up = model.loss(&inputs, &types, &targets, &weights)?.0;
            model.params_mut()[i] = orig - h;
            let down = model.loss(&inputs, &types, &targets, &weights)?.0;
            model.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
        let relative_error = if na + nn == 0.0 { 0.0 } else { diff / (na + nn) };
        out.push(TensorCheck { name: spec.name, relative_error, analytic_norm: na });
    }
    Ok(out)
}

/// The micro-model used for gradient checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        layers: 2,
        heads: 2,
        hidden_dim: 8,
        ff_dim: 12,
        max_positions: 16,
        seed: 3,
        ..ModelConfig::default()
    }
}
