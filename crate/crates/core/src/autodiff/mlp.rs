use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::check_finite;
use super::tape::{affine_forward, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Shape of a fully connected network.
///
/// Parameters are stored layer by layer; each layer is its weight matrix
/// (`fan_out x fan_in`, row-major) followed by its bias. An empty `hidden`
/// list gives a single affine map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpLayout {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
        }
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn check_segment(&self, len: usize) -> Result<()> {
        if len != self.param_count() {
            return Err(Error::Config(format!(
                "layout needs {} parameters, segment has {len}",
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) -> Result<()> {
        self.check_segment(params.len())?;
        let mut off = 0;
        for (fan_in, fan_out) in self.layers() {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for p in &mut params[off..off + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(())
    }

    /// Forward pass for `rows` inputs packed row-major.
    pub fn forward_batch(&self, params: &[f64], inputs: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_segment(params.len())?;
        if inputs.len() != rows * self.input_dim {
            return Err(Error::Config(format!(
                "expected {rows}x{} inputs, got {} values",
                self.input_dim,
                inputs.len()
            )));
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut off = 0;
        let mut h = inputs.to_vec();
        for (k, (fan_in, fan_out)) in layers.into_iter().enumerate() {
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            h = affine_forward(&h, rows, w, b, fan_in, fan_out);
            if k != last {
                match self.activation {
                    Activation::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            off += fan_in * fan_out + fan_out;
        }
        check_finite(&h, "mlp forward")?;
        Ok(h)
    }

    /// Records the network on a tape. `offset` locates the network's
    /// parameters inside the tape's parameter slice.
    pub fn record(&self, tape: &mut Tape<'_>, offset: usize, input: Var) -> Var {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut off = offset;
        let mut h = input;
        for (k, (fan_in, fan_out)) in layers.into_iter().enumerate() {
            h = tape.affine(h, off, fan_in, fan_out);
            if k != last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                };
            }
            off += fan_in * fan_out + fan_out;
        }
        h
    }
}

/// Single-input forward pass.
pub fn mlp_forward(params: &[f64], layout: &MlpLayout, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != layout.input_dim {
        return Err(Error::Config(format!(
            "input has length {}, layout expects {}",
            input.len(),
            layout.input_dim
        )));
    }
    layout.forward_batch(params, input, 1)
}
