use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2.5e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for a list of parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<S: AsRef<[T]>>(params: &[S]) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.as_ref().len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One bias-corrected update of every parameter slice.
    pub fn step(&mut self, config: &AdamConfig, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ModelError::DimensionMismatch { expected: self.m.len(), got: params.len().min(grads.len()) });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(ModelError::DimensionMismatch { expected: m.len(), got: p.len().min(g.len()) });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::lit(config.beta1);
        let b2 = T::lit(config.beta2);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(config.learning_rate);
        let eps = T::lit(config.epsilon);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + c1 * gi;
                v[i] = b2 * v[i] + c2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
