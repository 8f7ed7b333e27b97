use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamParams};
use super::ToyModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingParams {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup from 10% of the learning rate.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub adam: AdamParams,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 20,
            grad_clip: None,
            adam: AdamParams::default(),
        }
    }
}

impl TrainingParams {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            return self.learning_rate;
        }
        self.learning_rate * (0.1 + 0.9 * step as f64 / self.warmup_steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: usize,
    /// Mean batch loss of each step, before its update.
    pub losses: Vec<f64>,
}

impl TrainingReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Next-token training on `corpus` for `steps` Adam updates of
/// `batch_size` sequences each. The model's position map is used as is, so
/// a position-interpolated model is fine-tuned at interpolated positions.
pub fn train<I>(
    model: &mut ToyModel,
    corpus: &mut I,
    steps: usize,
    params: &TrainingParams,
) -> Result<TrainingReport>
where
    I: Iterator<Item = Vec<usize>> + ?Sized,
{
    train_with(model, corpus, steps, params, |_, _| {})
}

/// [`train`] that reports `(step, loss)` after every update.
pub fn train_with<I, F>(
    model: &mut ToyModel,
    corpus: &mut I,
    steps: usize,
    params: &TrainingParams,
    mut on_step: F,
) -> Result<TrainingReport>
where
    I: Iterator<Item = Vec<usize>> + ?Sized,
    F: FnMut(usize, f64),
{
    if params.batch_size == 0 || !(params.learning_rate > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let mut adam = Adam::new(model.weights(), params.adam);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut grads = model.weights().zeros_like();
        let mut loss = 0.0;
        let weight = 1.0 / params.batch_size as f32;
        for _ in 0..params.batch_size {
            let seq = corpus
                .next()
                .ok_or_else(|| Error::invalid("corpus ran out of sequences"))?;
            if seq.len() > model.context_window() {
                return Err(Error::invalid(format!(
                    "training sequence of {} tokens exceeds the window {}",
                    seq.len(),
                    model.context_window()
                )));
            }
            loss += model.loss_and_grad(&seq, weight, &mut grads)?;
        }
        let loss = loss / params.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NumericalFailure(format!("loss diverged at step {step}")));
        }
        if let Some(clip) = params.grad_clip {
            let norm = f64::from(grads.squared_norm()).sqrt();
            if norm > clip {
                grads.scale((clip / norm) as f32);
            }
        }
        adam.step(model.weights_mut(), &grads, params.learning_rate_at(step));
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainingReport { steps, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{sliding_window_perplexity, ToyModelConfig};

    fn small() -> ToyModel {
        ToyModel::build(ToyModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            trained_window: 32,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let mut model = small();
        let before = model.clone();
        let report = train(&mut model, &mut std::iter::empty(), 0, &TrainingParams::default()).unwrap();
        assert_eq!(model, before);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn learns_a_repeating_pattern() {
        let mut model = small();
        let pattern: Vec<usize> = (0..200).map(|i| 5 + i % 3).collect();
        let mut corpus = (0..).map(|i| pattern[i % 3..i % 3 + 32].to_vec());
        let params = TrainingParams {
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let untrained = sliding_window_perplexity(&model, &pattern, 32, 16).unwrap();
        let report = train(&mut model, &mut corpus, 60, &params).unwrap();
        let trained = sliding_window_perplexity(&model, &pattern, 32, 16).unwrap();
        assert_eq!(report.losses.len(), 60);
        assert!(trained < 1.1, "{trained}");
        assert!(trained < untrained);
    }

    #[test]
    fn rejects_sequences_longer_than_the_window() {
        let mut model = small();
        let mut corpus = std::iter::repeat(vec![1; 33]);
        assert!(matches!(
            train(&mut model, &mut corpus, 1, &TrainingParams::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn warmup_schedule() {
        let p = TrainingParams {
            learning_rate: 1.0,
            warmup_steps: 10,
            ..Default::default()
        };
        assert!((p.learning_rate_at(0) - 0.1).abs() < 1e-12);
        assert!((p.learning_rate_at(5) - 0.55).abs() < 1e-12);
        assert_eq!(p.learning_rate_at(10), 1.0);
        let none = TrainingParams { warmup_steps: 0, ..p };
        assert_eq!(none.learning_rate_at(0), 1.0);
    }
}
