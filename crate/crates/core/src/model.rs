//! A small classifier: either a single affine layer or one tanh hidden layer
//! followed by an affine output, plus momentum SGD with step decay.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::{axpy, Matrix};

/// One affine map, weights stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weight: Matrix::zeros(outputs, inputs),
            bias: alloc::vec![0.0; outputs],
        }
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = 1.0 / libm::sqrt(inputs.max(1) as f64);
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut layer = Layer::zeros(inputs, outputs);
        for w in layer.weight.as_mut_slice() {
            *w = normal.sample(rng);
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_transposed(&self.weight);
        for row in y.as_mut_slice().chunks_exact_mut(self.outputs().max(1)) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    fn num_values(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub hidden: Option<Layer>,
    pub output: Layer,
}

impl ClassifierParams {
    /// `hidden_units = 0` gives the linear model.
    pub fn init<R: Rng + ?Sized>(
        feature_dim: usize,
        hidden_units: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        if hidden_units == 0 {
            ClassifierParams {
                hidden: None,
                output: Layer::gaussian(feature_dim, outputs, rng),
            }
        } else {
            let hidden = Layer::gaussian(feature_dim, hidden_units, rng);
            let output = Layer::gaussian(hidden_units, outputs, rng);
            ClassifierParams {
                hidden: Some(hidden),
                output,
            }
        }
    }

    pub fn zeros(feature_dim: usize, hidden_units: usize, outputs: usize) -> Self {
        if hidden_units == 0 {
            ClassifierParams {
                hidden: None,
                output: Layer::zeros(feature_dim, outputs),
            }
        } else {
            ClassifierParams {
                hidden: Some(Layer::zeros(feature_dim, hidden_units)),
                output: Layer::zeros(hidden_units, outputs),
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).inputs()
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden.as_ref().map_or(0, Layer::outputs)
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// All parameters in a fixed order: hidden weight, hidden bias, output
    /// weight, output bias.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for layer in self.layers() {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Inverse of [`values`](Self::values); the slice length must match.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::shape(
                "parameter vector",
                self.num_values(),
                values.len(),
            ));
        }
        let mut rest = values;
        for layer in self.layers_mut() {
            let (w, tail) = rest.split_at(layer.weight.as_slice().len());
            layer.weight.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.layers().map(Layer::num_values).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.hidden.iter().chain(core::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.hidden
            .iter_mut()
            .chain(core::iter::once(&mut self.output))
    }

    /// Logits for every row of `features`.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(features)?.logits)
    }

    /// Forward pass keeping the hidden activations for [`backward`](Self::backward).
    pub fn forward_cached(&self, features: &Matrix) -> Result<Forward> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(
                "features",
                self.feature_dim(),
                features.cols(),
            ));
        }
        match &self.hidden {
            None => Ok(Forward {
                hidden: None,
                logits: self.output.forward(features),
            }),
            Some(h) => {
                let act = h.forward(features).map(libm::tanh);
                let logits = self.output.forward(&act);
                Ok(Forward {
                    hidden: Some(act),
                    logits,
                })
            }
        }
    }

    /// Parameter gradients from the loss gradient on the logits.
    pub fn backward(
        &self,
        features: &Matrix,
        forward: &Forward,
        upstream: &Matrix,
    ) -> Result<ClassifierParams> {
        if upstream.shape() != forward.logits.shape() {
            return Err(Error::shape(
                "upstream gradient",
                alloc::format!("{:?}", forward.logits.shape()),
                alloc::format!("{:?}", upstream.shape()),
            ));
        }
        let input = forward.hidden.as_ref().unwrap_or(features);
        let output = layer_grad(input, upstream);
        let hidden = match (&self.hidden, &forward.hidden) {
            (Some(_), Some(act)) => {
                // dL/da = upstream · W2, then through tanh' = 1 − a²
                let mut delta = upstream.matmul(&self.output.weight);
                for (d, a) in delta.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    *d *= 1.0 - a * a;
                }
                Some(layer_grad(features, &delta))
            }
            _ => None,
        };
        Ok(ClassifierParams { hidden, output })
    }
}

fn layer_grad(input: &Matrix, upstream: &Matrix) -> Layer {
    let weight = upstream.transpose_matmul(input);
    let mut bias = alloc::vec![0.0; upstream.cols()];
    for row in upstream.iter_rows() {
        axpy(1.0, row, &mut bias);
    }
    Layer { weight, bias }
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Option<Matrix>,
    pub logits: Matrix,
}

/// Iteration budget and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub base_lr: f64,
    pub decay: f64,
    /// Fractions of `iterations` at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            iterations: 3000,
            base_lr: 0.1,
            decay: 0.1,
            milestones: alloc::vec![2.0 / 3.0, 8.0 / 9.0],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 512,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !self.milestones.iter().all(|&m| m > 0.0 && m < 1.0) {
            return Err(Error::invalid("milestones", "must lie in (0, 1)"));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("milestones", "must be strictly increasing"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(4) {
            return Err(Error::invalid(
                "batch_size",
                "must be a positive multiple of 4",
            ));
        }
        Ok(())
    }

    /// Iteration indices at which decay kicks in.
    pub fn milestone_iterations(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|m| libm::round(m * self.iterations as f64) as usize)
            .collect()
    }

    /// `base · decay^(milestones passed)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self
            .milestone_iterations()
            .iter()
            .filter(|&&m| iteration >= m)
            .count();
        self.base_lr * libm::pow(self.decay, passed as f64)
    }
}

/// Velocity buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    velocity: Vec<f64>,
}

impl MomentumState {
    pub fn new(params: &ClassifierParams) -> Self {
        MomentumState {
            velocity: alloc::vec![0.0; params.num_values()],
        }
    }
}

/// `v ← m·v + g + wd·θ; θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ClassifierParams,
    grads: &ClassifierParams,
    schedule: &TrainSchedule,
    iteration: usize,
    state: &mut MomentumState,
) {
    let lr = schedule.lr_at(iteration);
    let mut k = 0;
    for (layer, grad) in params.layers_mut().zip(grads.layers()) {
        for (p, g) in layer
            .weight
            .as_mut_slice()
            .iter_mut()
            .chain(layer.bias.iter_mut())
            .zip(grad.weight.as_slice().iter().chain(&grad.bias))
        {
            let v = &mut state.velocity[k];
            *v = schedule.momentum * *v + g + schedule.weight_decay * *p;
            *p -= lr * *v;
            k += 1;
        }
    }
}
