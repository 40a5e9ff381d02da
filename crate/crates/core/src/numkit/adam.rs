use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    /// Fresh state with the usual `β1 = 0.9, β2 = 0.999, ε = 1e-8`.
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update. Pure: returns the new parameters and state.
    pub fn step(&self, params: &[f64], grads: &[f64]) -> Result<(Vec<f64>, AdamState)> {
        let mut next = self.clone();
        let mut out = params.to_vec();
        next.step_in_place(&mut out, grads)?;
        Ok((out, next))
    }

    /// In-place variant of [`AdamState::step`] for training loops.
    pub fn step_in_place(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam params", self.first_moment.len(), params.len())?;
        check_dim("adam grads", self.first_moment.len(), grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("adam received a non-finite gradient".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Convenience: `adam_step(state, params, grads) -> (params', state')`.
pub fn adam_step(state: &AdamState, params: &[f64], grads: &[f64]) -> Result<(Vec<f64>, AdamState)> {
    state.step(params, grads)
}
