use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    pub(crate) fn from_moments(
        template: AdamState,
        first_moment: Vec<Vec<f64>>,
        second_moment: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if first_moment.len() != template.first_moment.len()
            || first_moment
                .iter()
                .zip(&template.first_moment)
                .any(|(a, b)| a.len() != b.len())
            || second_moment.len() != first_moment.len()
            || second_moment
                .iter()
                .zip(&first_moment)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::shape("optimizer moments do not match parameters"));
        }
        Ok(Self {
            first_moment,
            second_moment,
            ..template
        })
    }

    /// Applies one update in place. Refuses (without touching anything) when
    /// any gradient entry is NaN or infinite.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::shape(format!("parameter {i} gradient length mismatch")));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: self.step,
                    reason: format!("non-finite gradient at parameter {i}, entry {j}"),
                    last_checkpoint: None,
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}
