use serde::{Deserialize, Serialize};

use super::params::{check_finite, ParamVector};
use crate::error::{Error, Result};

/// Moment estimates for Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_constants(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// Callers that ascend pass the negated gradient.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::Config(format!(
                "adam: params {}, grad {}, state {}",
                params.len(),
                grad.len(),
                self.first_moment.len()
            )));
        }
        check_finite(grad, "adam gradient")?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let (m, v) = (&mut self.first_moment, &mut self.second_moment);
        params.update(|p| {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
                v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        })
    }
}
