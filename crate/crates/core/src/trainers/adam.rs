use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::Vector;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates. `t` counts the updates folded in so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vector,
    pub v: Vector,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: Vector::zeros(n), v: Vector::zeros(n), t: 0, beta1: BETA1, beta2: BETA2, eps: EPSILON }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Folds one gradient into both moments and increments `t`.
    pub fn advance(&self, grad: &Vector) -> Result<AdamState> {
        Error::check_len(self.len(), grad.len())?;
        let (b1, b2) = (self.beta1, self.beta2);
        let m = self.m.as_slice().iter().zip(grad.as_slice()).map(|(m, g)| b1 * m + (1.0 - b1) * g).collect();
        let v = self.v.as_slice().iter().zip(grad.as_slice()).map(|(v, g)| b2 * v + (1.0 - b2) * g * g).collect();
        Ok(AdamState { m: Vector::checked(m, "adam first moment")?, v: Vector::checked(v, "adam second moment")?, t: self.t + 1, ..*self })
    }

    /// Bias-correction factor `sqrt(1 - beta2^t) / (1 - beta1^t)` for the current `t`.
    pub fn bias_factor(&self) -> f64 {
        let t = self.t.min(i32::MAX as u64) as i32;
        (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t))
    }

    /// `sqrt(v) + eps`, elementwise.
    pub fn denominators(&self) -> Vec<f64> {
        self.v.as_slice().iter().map(|v| v.sqrt() + self.eps).collect()
    }
}

/// One Adam step: `dw = -lr f m / (sqrt(v) + eps)` with the advanced moments.
pub fn adam_update(state: &AdamState, grad: &Vector, lr: f64) -> Result<(AdamState, Vector)> {
    let next = state.advance(grad)?;
    let f = next.bias_factor();
    let dw = next.m.as_slice().iter().zip(next.denominators()).map(|(m, d)| -lr * f * m / d).collect();
    let dw = Vector::checked(dw, "adam step")?;
    Ok((next, dw))
}
