//! Reconstruction objective: mean-squared error on pixels plus a weighted
//! mean-squared error on the real (unmasked) caption embedding elements.

use serde::{Deserialize, Serialize};

use super::network::LatentStats;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub image_loss: f64,
    pub text_loss: f64,
    /// Mean-over-elements KL divergence to the standard normal; zero unless a
    /// KL weight is configured.
    #[serde(default)]
    pub kl_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(image_loss: f64, text_loss: f64, lambda_text: f64) -> Self {
        Self { image_loss, text_loss, kl_loss: 0.0, total: image_loss + lambda_text * text_loss }
    }

    pub(crate) fn with_kl(mut self, kl: f64, weight: f64) -> Self {
        self.kl_loss = kl;
        self.total += weight * kl;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.image_loss.is_finite() && self.text_loss.is_finite() && self.total.is_finite()
    }
}

fn masked_count(mask: &[bool], embed_dim: usize) -> usize {
    mask.iter().filter(|&&m| m).count() * embed_dim
}

/// Loss of a reconstruction. `mask` has one entry per caption position, the
/// caption buffers `mask.len() × embed_dim` entries.
pub fn compute_loss(
    images: &[f64],
    image_recon: &[f64],
    captions: &[f64],
    text_recon: &[f64],
    mask: &[bool],
    embed_dim: usize,
    lambda_text: f64,
) -> LossBreakdown {
    assert_eq!(images.len(), image_recon.len(), "image shapes differ");
    assert_eq!(captions.len(), text_recon.len(), "caption shapes differ");
    assert_eq!(captions.len(), mask.len() * embed_dim, "mask does not match captions");
    let image_loss = if images.is_empty() {
        0.0
    } else {
        images.iter().zip(image_recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / images.len() as f64
    };
    let n = masked_count(mask, embed_dim);
    let text_loss = if n == 0 {
        0.0
    } else {
        let mut s = 0.0;
        for (p, &m) in mask.iter().enumerate() {
            if m {
                for i in p * embed_dim..(p + 1) * embed_dim {
                    let d = captions[i] - text_recon[i];
                    s += d * d;
                }
            }
        }
        s / n as f64
    };
    LossBreakdown::new(image_loss, text_loss, lambda_text)
}

/// Gradients of `total` with respect to both reconstructions.
pub fn loss_gradients(
    images: &[f64],
    image_recon: &[f64],
    captions: &[f64],
    text_recon: &[f64],
    mask: &[bool],
    embed_dim: usize,
    lambda_text: f64,
) -> (Vec<f64>, Vec<f64>) {
    let ni = images.len().max(1) as f64;
    let d_img = image_recon.iter().zip(images).map(|(r, x)| 2.0 * (r - x) / ni).collect();
    let n = masked_count(mask, embed_dim);
    let mut d_txt = vec![0.0; text_recon.len()];
    if n > 0 {
        let scale = 2.0 * lambda_text / n as f64;
        for (p, &m) in mask.iter().enumerate() {
            if m {
                for i in p * embed_dim..(p + 1) * embed_dim {
                    d_txt[i] = scale * (text_recon[i] - captions[i]);
                }
            }
        }
    }
    (d_img, d_txt)
}

/// Mean over elements of `KL(N(mu, sigma²) ‖ N(0, 1))`.
pub fn kl_divergence(stats: &LatentStats) -> f64 {
    let n = stats.mu.len().max(1) as f64;
    stats
        .mu
        .iter()
        .zip(&stats.log_sigma)
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0) - ls)
        .sum::<f64>()
        / n
}

/// Adds `weight · ∂KL` to the gradients on mu and log_sigma.
pub fn kl_gradients(stats: &LatentStats, weight: f64, d_mu: &mut [f64], d_ls: &mut [f64]) {
    let n = stats.mu.len().max(1) as f64;
    for i in 0..stats.mu.len() {
        d_mu[i] += weight * stats.mu[i] / n;
        d_ls[i] += weight * ((2.0 * stats.log_sigma[i]).exp() - 1.0) / n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_reconstruction_is_zero() {
        let x = vec![0.3; 12];
        let c = vec![0.5; 6];
        let l = compute_loss(&x, &x, &c, &c, &[true, false], 3, 3.0);
        assert_eq!((l.image_loss, l.text_loss, l.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn weighted_total() {
        let l = LossBreakdown::new(0.1, 0.02, 3.0);
        assert!((l.total - 0.16).abs() < 1e-15);
    }

    #[test]
    fn padding_positions_are_ignored() {
        let c = vec![1.0, 1.0, 9.0, 9.0];
        let r = vec![0.0, 1.0, 0.0, 0.0];
        let l = compute_loss(&[], &[], &c, &r, &[true, false], 2, 1.0);
        assert!((l.text_loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_zero_at_standard_normal() {
        let s = LatentStats { batch: 1, dim: 2, mu: vec![0.0; 2], log_sigma: vec![0.0; 2] };
        assert_eq!(kl_divergence(&s), 0.0);
    }

    proptest! {
        #[test]
        fn total_is_exact_weighted_sum(
            v in proptest::collection::vec(-5.0f64..5.0, 24),
            lambda in 0.0f64..10.0,
            mask in proptest::collection::vec(any::<bool>(), 3),
        ) {
            let (a, b) = v.split_at(12);
            let l = compute_loss(&a[..6], &b[..6], &a[6..], &b[6..], &mask, 2, lambda);
            prop_assert_eq!(l.total, l.image_loss + lambda * l.text_loss);
            prop_assert!(l.image_loss >= 0.0 && l.text_loss >= 0.0);
        }
    }
}
