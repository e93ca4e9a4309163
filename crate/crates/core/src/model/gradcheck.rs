//! Central finite-difference check of the analytic gradients.
//!
//! ReLU and max-pooling make the loss piecewise smooth. A probe whose `±h`
//! perturbation flips any ReLU sign or pooling winner straddles a kink, where
//! a finite difference is meaningless; such probes are detected by comparing
//! activation signatures and redrawn.

use rand::Rng;

use super::{Batch, Crvae, ModelError};
use crate::nn::Module;

/// Absolute floor on the relative-error denominator so that gradients at the
/// level of floating-point noise do not dominate the report.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Draws rejected because the perturbation crossed a kink.
    pub rejected_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

fn set_value(model: &mut Crvae, param: usize, element: usize, value: f64) -> f64 {
    let mut i = 0;
    let mut old = 0.0;
    model.visit_params_mut(&mut |p| {
        if i == param {
            old = p.value[element];
            p.value[element] = value;
        }
        i += 1;
    });
    old
}

/// Checks `probes` parameter elements drawn uniformly over all scalar
/// parameters of `model`, with central differences of step `h`.
pub fn gradient_check<R: Rng + ?Sized>(
    model: &Crvae,
    batch: &Batch,
    noise: Option<&[f64]>,
    probes: usize,
    h: f64,
    rng: &mut R,
) -> Result<GradCheckReport, ModelError> {
    let mut work = model.clone();
    work.zero_grad();
    let mut analytic_model = model.clone();
    analytic_model.zero_grad();
    analytic_model.loss_and_grad(batch, noise)?;
    let mut layout: Vec<(String, usize)> = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    analytic_model.visit_params(&mut |p| {
        layout.push((p.name.clone(), p.len()));
        grads.push(p.grad.clone());
    });
    let total: usize = layout.iter().map(|l| l.1).sum();
    let base_sig = work.activation_signature(batch, noise)?;

    let mut out = Vec::with_capacity(probes);
    let mut rejected = 0;
    let max_draws = probes * 50 + 100;
    let mut draws = 0;
    while out.len() < probes {
        draws += 1;
        if draws > max_draws {
            return Err(ModelError::Shape(format!(
                "could not find {probes} kink-free probes in {max_draws} draws"
            )));
        }
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= layout[pi].1 {
            flat -= layout[pi].1;
            pi += 1;
        }
        let orig = set_value(&mut work, pi, flat, 0.0);
        set_value(&mut work, pi, flat, orig + h);
        let sig_p = work.activation_signature(batch, noise)?;
        let lp = work.loss(batch, noise)?.total;
        set_value(&mut work, pi, flat, orig - h);
        let sig_m = work.activation_signature(batch, noise)?;
        let lm = work.loss(batch, noise)?.total;
        set_value(&mut work, pi, flat, orig);
        if sig_p != base_sig || sig_m != base_sig {
            rejected += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads[pi][flat];
        out.push(Probe {
            param: layout[pi].0.clone(),
            element: flat,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { probes: out, rejected_kinks: rejected })
}
