use super::layers::{Layer, LayerSpec, Tensor};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Feed-forward stack over a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: (usize, usize, usize),
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input;
        for l in &layers {
            shape = l.spec.output_shape(shape)?;
        }
        Ok(Network { input, layers })
    }

    pub fn init(input: (usize, usize, usize), specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        Network::new(input, specs.iter().map(|&s| Layer::init(s, rng)).collect())
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.shapes().last().copied().unwrap_or(self.input)
    }

    /// Output shape of every layer, in order.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shape = self.input;
        self.layers
            .iter()
            .map(|l| {
                shape = l.spec.output_shape(shape).expect("validated on construction");
                shape
            })
            .collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().map(|l| &mut l.params)
    }

    /// Zeroed gradient buffers matching every layer's parameters.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| vec![0.0; l.params.len()]).collect()
    }

    /// Returns the input followed by every layer's output.
    pub fn forward_trace(&self, x: Tensor) -> Result<Vec<Tensor>> {
        if x.shape() != self.input {
            return Err(Error::dimension(format!("network expects input {:?}, got {:?}", self.input, x.shape())));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (i, l) in self.layers.iter().enumerate() {
            let y = l.forward(acts.last().expect("non-empty"))?;
            if y.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(i, "non-finite activation"));
            }
            acts.push(y);
        }
        Ok(acts)
    }

    /// Propagates `dout` back to the input; accumulates parameter gradients
    /// into `grads` when given.
    pub fn backward(&self, acts: &[Tensor], dout: Tensor, mut grads: Option<&mut [Vec<f64>]>) -> Result<Tensor> {
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            let dp = grads.as_deref_mut().map(|g| g[i].as_mut_slice());
            d = self.layers[i].backward(&acts[i], &acts[i + 1], &d, dp);
            if d.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(i, "non-finite gradient"));
            }
        }
        Ok(d)
    }
}
