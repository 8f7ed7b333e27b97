use serde::{Deserialize, Serialize};

use super::{Scalar, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. The learning rate is passed per step so the
/// caller owns the schedule.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    params: AdamParams,
    m: Weights<S>,
    v: Weights<S>,
    t: u32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(weights: &Weights<S>, params: AdamParams) -> Self {
        Self {
            params,
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, weights: &mut Weights<S>, grads: &Weights<S>, lr: f64) {
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        let (b1, b2) = (S::lit(p.beta1), S::lit(p.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - p.beta1), S::lit(1.0 - p.beta2));
        let step = S::lit(lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let eps = S::lit(p.eps);
        let grads: Vec<&[S]> = grads.named_tensors().into_iter().map(|(_, _, g)| g).collect();
        let tensors = weights
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads);
        for (((w, m), v), g) in tensors {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                w[i] = w[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToyModel, ToyModelConfig};

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let cfg = ToyModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            trained_window: 4,
            ..Default::default()
        };
        let model = ToyModel::<f64>::build_in(cfg).unwrap();
        let before = model.weights().clone();
        let mut w = before.clone();
        let mut g = w.zeros_like();
        g.tensors_mut().into_iter().for_each(|t| t.fill(0.3));
        let mut adam = Adam::new(&w, AdamParams::default());
        adam.step(&mut w, &g, 0.01);
        let moved: Vec<f64> = w
            .named_tensors()
            .iter()
            .zip(before.named_tensors())
            .flat_map(|((_, _, a), (_, _, b))| a.iter().zip(b).map(|(x, y)| y - x).collect::<Vec<_>>())
            .collect();
        assert!(moved.iter().all(|d| (d - 0.01).abs() < 1e-9));
        assert_eq!(adam.steps_taken(), 1);
    }
}
