use rand::Rng;

use super::linalg;
use super::{Module, Param};

/// Fully connected layer, `y = x W^T + b` with `W: out×in`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: Param::uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_dim], bound, rng),
        }
    }

    /// `x: rows×in` → `rows×out`.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        linalg::matmul_nt(x, &self.weight.value, Some(&self.bias.value), rows, self.out_dim, self.in_dim)
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        self.accumulate_grads(x, dy, rows);
        linalg::matmul_nn(dy, &self.weight.value, rows, self.out_dim, self.in_dim)
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate_grads(&mut self, x: &[f64], dy: &[f64], rows: usize) {
        linalg::accumulate_outer(dy, x, &mut self.weight.grad, rows, self.out_dim, self.in_dim);
        linalg::accumulate_column_sums(dy, &mut self.bias.grad, rows, self.out_dim);
    }
}

impl Module for Dense {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
