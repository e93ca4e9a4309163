use super::{Buffer, Module, Param};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the rows of a `batch×features` matrix.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub features: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub batch: usize,
}

impl BatchNorm1d {
    pub fn new(name: &str, features: usize) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[features]);
        gamma.value.iter_mut().for_each(|g| *g = 1.0);
        Self {
            features,
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[features]),
            running_mean: Buffer { name: format!("{name}.running_mean"), value: vec![0.0; features] },
            running_var: Buffer { name: format!("{name}.running_var"), value: vec![1.0; features] },
        }
    }

    /// Normalizes with the statistics of this batch (biased variance).
    pub fn forward_train(&self, x: &[f64], batch: usize) -> (Vec<f64>, BatchNormCache) {
        let f = self.features;
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..batch {
            for (m, v) in mean.iter_mut().zip(&x[r * f..(r + 1) * f]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        for r in 0..batch {
            for j in 0..f {
                let d = x[r * f + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= batch as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; batch * f];
        let mut y = vec![0.0; batch * f];
        for r in 0..batch {
            for j in 0..f {
                let xh = (x[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = xh;
                y[r * f + j] = self.gamma.value[j] * xh + self.beta.value[j];
            }
        }
        (y, BatchNormCache { xhat, inv_std, batch_mean: mean, batch_var: var, batch })
    }

    pub fn forward_eval(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let f = self.features;
        let mut y = vec![0.0; batch * f];
        for r in 0..batch {
            for j in 0..f {
                let inv = 1.0 / (self.running_var.value[j] + BN_EPS).sqrt();
                y[r * f + j] = self.gamma.value[j] * (x[r * f + j] - self.running_mean.value[j]) * inv + self.beta.value[j];
            }
        }
        y
    }

    /// Exponential moving average update with the unbiased batch variance.
    pub fn update_running_stats(&mut self, cache: &BatchNormCache) {
        let n = cache.batch as f64;
        let correction = if cache.batch > 1 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.features {
            let rm = &mut self.running_mean.value[j];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * cache.batch_mean[j];
            let rv = &mut self.running_var.value[j];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * cache.batch_var[j] * correction;
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &[f64]) -> Vec<f64> {
        let f = self.features;
        let b = cache.batch;
        let mut sum_dxhat = vec![0.0; f];
        let mut sum_dxhat_xhat = vec![0.0; f];
        for r in 0..b {
            for j in 0..f {
                let g = dy[r * f + j];
                let xh = cache.xhat[r * f + j];
                self.gamma.grad[j] += g * xh;
                self.beta.grad[j] += g;
                let dxh = g * self.gamma.value[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * xh;
            }
        }
        let nb = b as f64;
        let mut dx = vec![0.0; b * f];
        for r in 0..b {
            for j in 0..f {
                let dxh = dy[r * f + j] * self.gamma.value[j];
                let xh = cache.xhat[r * f + j];
                dx[r * f + j] = cache.inv_std[j] / nb * (nb * dxh - sum_dxhat[j] - xh * sum_dxhat_xhat[j]);
            }
        }
        dx
    }
}

impl Module for BatchNorm1d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Buffer)) {
        f(&self.running_mean);
        f(&self.running_var);
    }
}
