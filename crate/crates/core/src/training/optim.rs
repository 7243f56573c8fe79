//! AdamW with bias correction and decoupled weight decay.
//!
//! ```text
//! p ← p − lr·λ·p
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! p ← p − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8, no weight decay.
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub hyper: AdamWConfig,
}

impl OptimizerState {
    /// Zeroed moments shaped like `params`.
    pub fn new(hyper: AdamWConfig, params: &[&Matrix]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            hyper,
        }
    }
}

pub fn adamw_step(params: &mut [&mut Matrix], grads: &[&Matrix], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Validation(format!(
            "optimizer expects {} parameters, got {} parameters and {} gradients",
            state.first_moment.len(),
            params.len(),
            grads.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw gradient", p.shape(), g.shape()));
        }
        if p.shape() != m.shape() {
            return Err(Error::shape("adamw moment", m.shape(), p.shape()));
        }
    }

    state.step += 1;
    let h = &state.hyper;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[k].as_mut_slice();
        let v = state.second_moment[k].as_mut_slice();
        for (((pi, gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            if h.weight_decay != 0.0 {
                *pi -= h.learning_rate * h.weight_decay * *pi;
            }
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= h.learning_rate * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}
