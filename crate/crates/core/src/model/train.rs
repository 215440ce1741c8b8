use ndarray::NdFloat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Transformer};
use crate::linearize::{LinearizedExample, TokenId, TokenType};

/// Optimization schedule. Defaults are the full-scale values; [`TrainSchedule::toy`]
/// is tuned for the bundled toy corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
    /// Steps between validations.
    pub validate_every: u64,
    /// Validations without improvement before the learning rate is halved.
    pub patience: u32,
    /// Training stops when patience runs out after this many halvings.
    pub max_halvings: u32,
    pub max_steps: Option<u64>,
    pub max_epochs: Option<u64>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 24,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: 1.0,
            validate_every: 5000,
            patience: 5,
            max_halvings: 3,
            max_steps: None,
            max_epochs: None,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn toy() -> Self {
        TrainSchedule {
            batch_size: 8,
            learning_rate: 2e-3,
            validate_every: 250,
            patience: 5,
            max_epochs: Some(60),
            ..TrainSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.grad_clip_norm > 0.0
            && self.validate_every > 0
            && self.patience > 0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig("training schedule values must be positive".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean per-token loss over the steps since the previous record.
    pub train_loss: f64,
    pub valid_ppl: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    MaxEpochs,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Transformer<f32>,
    pub log: Vec<LogRecord>,
    pub steps: u64,
    pub epochs: u64,
    pub stop_reason: StopReason,
    pub final_lr: f64,
    pub best_valid_ppl: Option<f64>,
}

/// Inputs, types, next-token targets and loss weights of an example: the
/// prediction made at position `t` is scored against token `t + 1` when
/// that token carries loss.
pub fn sequence_targets(ex: &LinearizedExample) -> (&[TokenId], &[TokenType], &[TokenId], &[bool]) {
    let n = ex.len().saturating_sub(1);
    (&ex.token_ids[..n], &ex.token_type_ids[..n], &ex.token_ids[ex.len().min(1)..], &ex.loss_mask[ex.len().min(1)..])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplScope {
    /// Every supervised position.
    AllMasked,
    /// Supervised positions inside machine utterances, conditioned on the
    /// gold semantic spans present in the sequence.
    MachineUttOnly,
}

/// `exp` of the mean cross-entropy over in-scope positions.
pub fn evaluate_ppl<F: NdFloat>(
    model: &Transformer<F>,
    examples: &[LinearizedExample],
    scope: PplScope,
) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    let mut count = 0;
    for ex in examples {
        let (inputs, types, targets, mask) = sequence_targets(ex);
        let weights: Vec<bool> = match scope {
            PplScope::AllMasked => mask.to_vec(),
            PplScope::MachineUttOnly => mask
                .iter()
                .zip(&ex.token_type_ids[1..])
                .map(|(&m, &t)| m && t == TokenType::MachineUtterance)
                .collect(),
        };
        let (s, c) = model.loss(inputs, types, targets, &weights)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(ModelError::NoInScopePositions);
    }
    Ok((sum / count as f64).exp())
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, s: &TrainSchedule) {
        self.t += 1;
        let (b1, b2) = (s.beta1, s.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (s.epsilon * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

fn clip(grads: &mut [f32], max_norm: f64) {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= k);
    }
}

/// Minimizes masked next-token cross-entropy. Batches are drawn from a
/// seeded shuffle; the loss of a batch is averaged over its supervised
/// positions. `on_log` sees every log record as it is produced.
pub fn train(
    train_examples: &[LinearizedExample],
    valid_examples: &[LinearizedExample],
    config: &ModelConfig,
    schedule: &TrainSchedule,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome, ModelError> {
    schedule.validate()?;
    if train_examples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut model = Transformer::<f32>::new(config.clone())?;
    let n_params = model.num_params();
    let mut grads = vec![0f32; n_params];
    let mut adam = Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    dropout_rng.set_stream(1);

    let mut lr = schedule.learning_rate;
    let (mut best, mut bad, mut halvings) = (f64::INFINITY, 0u32, 0u32);
    let mut best_valid = None;
    let mut log = Vec::new();
    let (mut window_loss, mut window_count) = (0.0f64, 0usize);
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut order: Vec<usize> = (0..train_examples.len()).collect();

    let validate = |step: u64, lr: f64, model: &Transformer<f32>, window: (f64, usize)| -> Result<LogRecord, ModelError> {
        let valid_ppl =
            if valid_examples.is_empty() { None } else { Some(evaluate_ppl(model, valid_examples, PplScope::AllMasked)?) };
        let train_loss = if window.1 == 0 { 0.0 } else { window.0 / window.1 as f64 };
        Ok(LogRecord { step, train_loss, valid_ppl, lr })
    };

    let stop_reason = 'outer: loop {
        if schedule.max_epochs.is_some_and(|m| epoch >= m) {
            break StopReason::MaxEpochs;
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(schedule.batch_size) {
            if schedule.max_steps.is_some_and(|m| step >= m) {
                break 'outer StopReason::MaxSteps;
            }
            let supervised: usize =
                batch.iter().map(|&i| sequence_targets(&train_examples[i]).3.iter().filter(|&&m| m).count()).sum();
            if supervised == 0 {
                continue;
            }
            grads.fill(0.0);
            let scale = 1.0 / supervised as f32;
            let mut loss = 0.0;
            for &i in batch {
                let (inputs, types, targets, weights) = sequence_targets(&train_examples[i]);
                let drop = (config.dropout > 0.0).then_some(&mut dropout_rng);
                loss += model.loss_and_grad(inputs, types, targets, weights, scale, &mut grads, drop)?.0;
            }
            let mean = loss / supervised as f64;
            if !mean.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::Diverged { step, loss: mean });
            }
            clip(&mut grads, schedule.grad_clip_norm);
            adam.step(model.params_mut(), &grads, lr, schedule);
            step += 1;
            window_loss += loss;
            window_count += supervised;

            if step.is_multiple_of(schedule.validate_every) {
                let rec = validate(step, lr, &model, (window_loss, window_count))?;
                (window_loss, window_count) = (0.0, 0);
                on_log(&rec);
                if let Some(ppl) = rec.valid_ppl {
                    best_valid = Some(best_valid.map_or(ppl, |b: f64| b.min(ppl)));
                    if ppl < best {
                        best = ppl;
                        bad = 0;
                    } else {
                        bad += 1;
                    }
                }
                log.push(rec);
                if bad >= schedule.patience {
                    if halvings >= schedule.max_halvings {
                        break 'outer StopReason::Plateau;
                    }
                    lr /= 2.0;
                    halvings += 1;
                    bad = 0;
                }
            }
        }
        epoch += 1;
    };
    if window_count > 0 || log.is_empty() {
        let rec = validate(step, lr, &model, (window_loss, window_count))?;
        if let Some(ppl) = rec.valid_ppl {
            best_valid = Some(best_valid.map_or(ppl, |b: f64| b.min(ppl)));
        }
        on_log(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { model, log, steps: step, epochs: epoch, stop_reason, final_lr: lr, best_valid_ppl: best_valid })
}
