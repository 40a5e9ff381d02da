//! Gated recurrent unit (Cho et al. formulation).
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{sigmoid, Matrix};
use super::params::Parameterized;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    /// `hidden × input`
    pub w: Matrix,
    /// `hidden × hidden`
    pub u: Matrix,
    pub b: Vec<f64>,
}

impl Gate {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(hidden_dim, input_dim),
            u: Matrix::zeros(hidden_dim, hidden_dim),
            b: vec![0.0; hidden_dim],
        }
    }

    fn glorot<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        Self {
            w: Matrix::glorot(hidden_dim, input_dim, rng),
            u: Matrix::glorot(hidden_dim, hidden_dim, rng),
            b: vec![0.0; hidden_dim],
        }
    }

    fn pre_activation(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let wx = self.w.matvec(x);
        let uh = self.u.matvec(h);
        wx.iter()
            .zip(&uh)
            .zip(&self.b)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }

    /// Accumulates `∂/∂W += δ xᵀ`, `∂/∂U += δ hᵀ`, `∂/∂b += δ`.
    fn accumulate(&mut self, delta: &[f64], x: &[f64], h: &[f64]) {
        self.w.add_outer(1.0, delta, x);
        self.u.add_outer(1.0, delta, h);
        for (gb, d) in self.b.iter_mut().zip(delta) {
            *gb += d;
        }
    }
}

/// Gradient of a scalar with respect to every GRU parameter.
pub type GruGrads = Gru;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    input_dim: usize,
    hidden_dim: usize,
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    cand: Vec<f64>,
}

impl Gru {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            update: Gate::zeros(input_dim, hidden_dim),
            reset: Gate::zeros(input_dim, hidden_dim),
            candidate: Gate::zeros(input_dim, hidden_dim),
        }
    }

    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("GRU dims must be positive".into()));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            update: Gate::glorot(input_dim, hidden_dim, rng),
            reset: Gate::glorot(input_dim, hidden_dim, rng),
            candidate: Gate::glorot(input_dim, hidden_dim, rng),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn forward(&self, h: &[f64], x: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        check_dim("gru hidden state", self.hidden_dim, h.len())?;
        check_dim("gru input", self.input_dim, x.len())?;
        let z: Vec<f64> = self
            .update
            .pre_activation(x, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = self
            .reset
            .pre_activation(x, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = self
            .candidate
            .pre_activation(x, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let next = (0..self.hidden_dim)
            .map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i])
            .collect();
        Ok((
            next,
            GruCache {
                x: x.to_vec(),
                h: h.to_vec(),
                z,
                r,
                rh,
                cand,
            },
        ))
    }

    /// Back-propagates `upstream = ∂L/∂h'`; returns `(∂L/∂params, ∂L/∂h, ∂L/∂x)`.
    pub fn backward(
        &self,
        cache: &GruCache,
        upstream: &[f64],
    ) -> Result<(GruGrads, Vec<f64>, Vec<f64>)> {
        if cache.h.len() != self.hidden_dim || cache.x.len() != self.input_dim {
            return Err(Error::Contract(
                "GRU cache was produced by a cell of a different shape".into(),
            ));
        }
        check_dim("gru upstream", self.hidden_dim, upstream.len())?;
        let n = self.hidden_dim;
        let mut grads = self.zeros_like();

        let mut dh: Vec<f64> = (0..n).map(|i| upstream[i] * (1.0 - cache.z[i])).collect();
        let d_cand_pre: Vec<f64> = (0..n)
            .map(|i| upstream[i] * cache.z[i] * (1.0 - cache.cand[i] * cache.cand[i]))
            .collect();
        let d_z_pre: Vec<f64> = (0..n)
            .map(|i| {
                upstream[i] * (cache.cand[i] - cache.h[i]) * cache.z[i] * (1.0 - cache.z[i])
            })
            .collect();

        grads
            .candidate
            .accumulate(&d_cand_pre, &cache.x, &cache.rh);
        let d_rh = self.candidate.u.matvec_t(&d_cand_pre);
        let d_r_pre: Vec<f64> = (0..n)
            .map(|i| d_rh[i] * cache.h[i] * cache.r[i] * (1.0 - cache.r[i]))
            .collect();
        for i in 0..n {
            dh[i] += d_rh[i] * cache.r[i];
        }

        grads.update.accumulate(&d_z_pre, &cache.x, &cache.h);
        grads.reset.accumulate(&d_r_pre, &cache.x, &cache.h);

        for part in [
            self.update.u.matvec_t(&d_z_pre),
            self.reset.u.matvec_t(&d_r_pre),
        ] {
            for (a, b) in dh.iter_mut().zip(&part) {
                *a += b;
            }
        }

        let mut dx = self.candidate.w.matvec_t(&d_cand_pre);
        for part in [
            self.update.w.matvec_t(&d_z_pre),
            self.reset.w.matvec_t(&d_r_pre),
        ] {
            for (a, b) in dx.iter_mut().zip(&part) {
                *a += b;
            }
        }
        Ok((grads, dh, dx))
    }
}

impl Parameterized for Gru {
    fn num_params(&self) -> usize {
        3 * (self.hidden_dim * self.input_dim + self.hidden_dim * self.hidden_dim + self.hidden_dim)
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for g in [&self.update, &self.reset, &self.candidate] {
            out.extend_from_slice(g.w.as_slice());
            out.extend_from_slice(g.u.as_slice());
            out.extend_from_slice(&g.b);
        }
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.num_params();
        if src.len() < need {
            return Err(Error::dim("gru parameter vector", need, src.len()));
        }
        let mut at = 0;
        for g in [&mut self.update, &mut self.reset, &mut self.candidate] {
            for dst in [g.w.as_mut_slice(), g.u.as_mut_slice(), g.b.as_mut_slice()] {
                let n = dst.len();
                dst.copy_from_slice(&src[at..at + n]);
                at += n;
            }
        }
        Ok(at)
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim)
    }
}
