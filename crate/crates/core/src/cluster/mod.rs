//! K-means over latent means, cluster-quality metrics, the K sweep and 2-D
//! projections.

mod kmeans;
mod metrics;
mod projection;
mod sweep;

use thiserror::Error;

pub use kmeans::{kmeans, Clustering, DEFAULT_RESTARTS, MAX_ITERATIONS};
pub use metrics::{avg_cross_distance, avg_intra_distance, rand_index, robustness};
pub use projection::{project_2d, write_scatter_csv, DEFAULT_PERPLEXITY};
pub use sweep::{sweep_k, write_sweep_csv, KSweepReport, SweepRow, DEFAULT_K_MAX, DEFAULT_K_MIN};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("clustering configuration error: {0}")]
    Config(String),
}
