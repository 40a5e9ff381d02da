//! Fully connected network with tanh hidden layers and a linear head.
//!
//! Gradients are returned as an [`Mlp`] of identical shape, so they can be
//! flattened, summed and fed to [`crate::numkit::AdamState`] with the same
//! machinery as the parameters themselves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::Parameterized;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape `(out_dim, in_dim)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Gradient of a scalar with respect to every weight and bias of an [`Mlp`].
pub type MlpGrads = Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `inputs[k]` is the input to layer k; `outputs[k]` its activated output.
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    shape: Vec<(usize, usize)>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        self.inputs.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Builds a network through `dims` (e.g. `[80, 64, 64, 32]`) with tanh on
    /// every hidden layer and a linear output, Glorot-uniform weights and zero
    /// biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid MLP dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| Dense {
                weight: Matrix::glorot(dims[k + 1], dims[k], rng),
                bias: vec![0.0; dims[k + 1]],
                activation: if k + 1 == n {
                    Activation::Linear
                } else {
                    Activation::Tanh
                },
            })
            .collect();
        Ok(Self { layers })
    }

    /// Same architecture as [`Mlp::new`] with every parameter zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid MLP dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| Dense {
                weight: Matrix::zeros(dims[k + 1], dims[k]),
                bias: vec![0.0; dims[k + 1]],
                activation: if k + 1 == n {
                    Activation::Linear
                } else {
                    Activation::Tanh
                },
            })
            .collect();
        Ok(Self { layers })
    }

    /// Assembles a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            check_dim(&format!("layer {k} bias"), layer.out_dim(), layer.bias.len())?;
            if k > 0 {
                check_dim(
                    &format!("layer {k} input"),
                    layers[k - 1].out_dim(),
                    layer.in_dim(),
                )?;
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn shape(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.out_dim(), l.in_dim()))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_dim("mlp input", self.in_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi = layer.activation.apply(*zi + bi);
            }
            inputs.push(std::mem::replace(&mut h, z.clone()));
            outputs.push(z);
        }
        Ok((
            h,
            MlpCache {
                inputs,
                outputs,
                shape: self.shape(),
            },
        ))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Back-propagates `upstream = ∂L/∂y` and returns `(∂L/∂params, ∂L/∂x)`.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if cache.shape != self.shape() {
            return Err(Error::Contract(
                "MLP cache was produced by a network of a different shape".into(),
            ));
        }
        check_dim("mlp upstream", self.out_dim(), upstream.len())?;
        let mut grads = self.zeros_like();
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            for (d, &y) in delta.iter_mut().zip(&cache.outputs[k]) {
                *d *= layer.activation.derivative_from_output(y);
            }
            let g = &mut grads.layers[k];
            g.weight.add_outer(1.0, &delta, &cache.inputs[k]);
            for (gb, d) in g.bias.iter_mut().zip(&delta) {
                *gb += d;
            }
            delta = layer.weight.matvec_t(&delta);
        }
        Ok((grads, delta))
    }
}

impl Parameterized for Mlp {
    fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            let n = w.len();
            let Some(chunk) = src.get(at..at + n) else {
                return Err(Error::dim("mlp parameter vector", at + n, src.len()));
            };
            w.copy_from_slice(chunk);
            at += n;
            let n = l.bias.len();
            let Some(chunk) = src.get(at..at + n) else {
                return Err(Error::dim("mlp parameter vector", at + n, src.len()));
            };
            l.bias.copy_from_slice(chunk);
            at += n;
        }
        Ok(at)
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.weight.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
        z
    }
}
