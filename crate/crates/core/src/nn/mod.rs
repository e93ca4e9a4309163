//! Minimal neural-network building blocks with hand-written backward passes.
//!
//! Activations are flat row-major `f64` buffers; each layer documents the
//! shape it expects. Layers never own activations: the forward pass returns a
//! cache that the caller hands back to `backward`, which accumulates parameter
//! gradients in place and returns the input gradient.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod linalg;
pub mod norm;
pub mod optim;
pub mod recurrent;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform in `[-bound, bound]`, the usual fan-in scaled init.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in &mut p.value {
                *v = dist.sample(rng);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Non-trainable state that still belongs in a checkpoint (batch-norm running
/// statistics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

/// Gives ordered access to every parameter and buffer of a model. The order
/// is the checkpoint layout, so it must be stable.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Buffer)) {}
    fn visit_buffers<'a>(&'a self, _f: &mut dyn FnMut(&'a Buffer)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}
