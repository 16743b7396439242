//! Small dense-network engine: flat parameter storage, batched forward pass
//! with a recording tape, exact reverse-mode gradients, Adam and a step
//! learning-rate schedule.

mod checkpoint;
mod network;
mod optim;

pub use checkpoint::{read_net, write_net, NET_MAGIC, NET_VERSION};
pub use network::{backward, forward, Mode, Tape};
pub use optim::{adam_step, step_lr_schedule, AdamConfig, AdamState};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    PRelu,
    /// Row-wise softmax over the whole layer output.
    Softmax,
    Exponential,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::PRelu => 1,
            Activation::Softmax => 2,
            Activation::Exponential => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Activation::Identity,
            1 => Activation::PRelu,
            2 => Activation::Softmax,
            3 => Activation::Exponential,
            _ => return None,
        })
    }
}

/// Layer widths `[in, h_1, ..., out]` with one activation and one dropout
/// probability per linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    dropout: Vec<f64>,
}

impl DenseNetSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, dropout: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("network needs an input and an output width".into()));
        }
        let layers = widths.len() - 1;
        if activations.len() != layers || dropout.len() != layers {
            return Err(Error::Config(format!(
                "{layers} layers but {} activations and {} dropout rates",
                activations.len(),
                dropout.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {widths:?}")));
        }
        if let Some(p) = dropout.iter().find(|p| !(**p >= 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
        }
        if activations[..layers - 1].contains(&Activation::Softmax) {
            return Err(Error::Config("softmax is only allowed on the final layer".into()));
        }
        Ok(DenseNetSpec {
            widths,
            activations,
            dropout,
        })
    }

    /// PReLU hidden layers with shared dropout and an identity output layer.
    pub fn mlp(widths: Vec<usize>, dropout: f64) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::PRelu; layers];
        let mut rates = vec![dropout; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        if let Some(last) = rates.last_mut() {
            *last = 0.0;
        }
        Self::new(widths, activations, rates)
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.activations[layer]
    }

    pub fn dropout(&self, layer: usize) -> f64 {
        self.dropout[layer]
    }

    /// Offsets of every layer's weights, biases and PReLU slope in the flat
    /// parameter vector, plus the total length.
    pub fn layout(&self) -> (Vec<LayerOffsets>, usize) {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let weights = offset;
            offset += fan_in * fan_out;
            let bias = offset;
            offset += fan_out;
            let slope = if self.activations[l] == Activation::PRelu {
                offset += 1;
                Some(offset - 1)
            } else {
                None
            };
            out.push(LayerOffsets {
                weights,
                bias,
                slope,
                fan_in,
                fan_out,
            });
        }
        (out, offset)
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().1
    }
}

/// Position of one layer inside a [`ParameterSet`]. Weights are stored
/// row-major as `fan_out × fan_in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOffsets {
    pub weights: usize,
    pub bias: usize,
    pub slope: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// All trainable values of one network in a single flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    values: Vec<f64>,
    layout: Vec<LayerOffsets>,
    generation: u64,
}

impl ParameterSet {
    /// Glorot-uniform weights, zero biases, PReLU slopes at 0.25.
    pub fn init(spec: &DenseNetSpec, seed: u64) -> Self {
        let (layout, len) = spec.layout();
        let mut values = vec![0.0; len];
        let mut rng = rng_from_seed(seed);
        for l in &layout {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for v in &mut values[l.weights..l.weights + l.fan_in * l.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            if let Some(s) = l.slope {
                values[s] = 0.25;
            }
        }
        ParameterSet {
            values,
            layout,
            generation: 0,
        }
    }

    pub fn from_values(spec: &DenseNetSpec, values: Vec<f64>) -> Result<Self> {
        let (layout, len) = spec.layout();
        if values.len() != len {
            return Err(Error::Shape {
                context: "parameter vector",
                expected: len,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("parameter vector contains non-finite entries".into()));
        }
        Ok(ParameterSet {
            values,
            layout,
            generation: 0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access bumps the generation so tapes recorded earlier are
    /// rejected by [`backward`].
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerOffsets] {
        &self.layout
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let l = self.layout[layer];
        &self.values[l.weights..l.weights + l.fan_in * l.fan_out]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = self.layout[layer];
        &self.values[l.bias..l.bias + l.fan_out]
    }

    pub fn slope(&self, layer: usize) -> Option<f64> {
        self.layout[layer].slope.map(|s| self.values[s])
    }
}
