use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Element-wise gradient clamp applied before the moment update.
    pub clip_value: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_value: Some(0.01) }
    }
}

/// AdamW with decoupled weight decay. Moments are kept per parameter in the
/// visiting order of the model.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips every gradient element to `[-clip, clip]`.
    pub fn clip(param: &mut Param, clip: f64) {
        for g in &mut param.grad {
            *g = g.clamp(-clip, clip);
        }
    }

    /// Starts a step; call [`update`](Self::update) for each parameter in
    /// model order afterwards.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, index: usize, param: &mut Param) {
        let c = self.config;
        if self.m.len() <= index {
            self.m.resize_with(index + 1, Vec::new);
            self.v.resize_with(index + 1, Vec::new);
        }
        if self.m[index].len() != param.len() {
            self.m[index] = vec![0.0; param.len()];
            self.v[index] = vec![0.0; param.len()];
        }
        if let Some(clip) = c.clip_value {
            Self::clip(param, clip);
        }
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        for i in 0..param.value.len() {
            let g = param.grad[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let p = &mut param.value[i];
            *p -= c.lr * c.weight_decay * *p;
            *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut p = Param::zeros("p", &[3]);
        p.value = vec![1.0, 1.0, 1.0];
        p.grad = vec![5.0, -0.001, 0.0];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.begin_step();
        opt.update(0, &mut p);
        // Bias-corrected first step is lr * g/|g| regardless of magnitude.
        assert!((p.value[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((p.value[1] - (1.0 + 1e-4)).abs() < 1e-8);
        assert_eq!(p.value[2], 1.0);
        // The large gradient was clamped to the clip value.
        assert_eq!(p.grad[0], 0.01);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = Param::zeros("p", &[1]);
        p.value = vec![2.0];
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        opt.begin_step();
        opt.update(0, &mut p);
        assert!((p.value[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
