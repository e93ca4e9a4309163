//! Convolutional-recurrent variational autoencoder over aligned frame/caption
//! pairs.

mod checkpoint;
pub mod gradcheck;
pub mod config;
pub mod data;
pub mod loss;
mod network;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use data::{AlignedPair, Batch, LatentMatrix};
pub use loss::{compute_loss, LossBreakdown};
pub use network::{Crvae, ForwardPass, LatentStats, Mode, TextInput};
pub use train::{extract_latents, reconstruct, train, train_with_observer, write_loss_curve, Reconstruction};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}; training aborted")]
    NonFinite { epoch: usize, last_good: Box<Checkpoint> },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `z = mu + exp(log_sigma) · ε` with `ε ~ N(0, I)` drawn from `rng` in row
/// order.
pub fn reparameterize<R: Rng + ?Sized>(stats: &LatentStats, rng: &mut R) -> Vec<f64> {
    let eps = standard_normal(stats.mu.len(), rng);
    reparameterize_with(stats, &eps)
}

/// Reparameterization with an explicit noise draw.
pub fn reparameterize_with(stats: &LatentStats, eps: &[f64]) -> Vec<f64> {
    assert_eq!(eps.len(), stats.mu.len(), "noise must match the latent shape");
    stats
        .mu
        .iter()
        .zip(&stats.log_sigma)
        .zip(eps)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect()
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats(mu: f64, ls: f64, n: usize) -> LatentStats {
        LatentStats { batch: 1, dim: n, mu: vec![mu; n], log_sigma: vec![ls; n] }
    }

    #[test]
    fn identity_case_returns_noise() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let z = reparameterize(&stats(0.0, 0.0, 7), &mut a);
        assert_eq!(z, standard_normal(7, &mut b));
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = reparameterize(&stats(0.7, -20.0, 50), &mut rng);
        assert!(z.iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn same_seed_is_reproducible() {
        let s = stats(0.2, 0.1, 20);
        let z1 = reparameterize(&s, &mut ChaCha8Rng::seed_from_u64(9));
        let z2 = reparameterize(&s, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(z1, z2);
    }
}
