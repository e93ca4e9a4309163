use std::io::Write;

use bhtsne::tSNE;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ClusterError;
use crate::model::LatentMatrix;

pub const DEFAULT_PERPLEXITY: f64 = 8.0;
/// Standard deviation of the seeded initial layout.
const INIT_SCALE: f64 = 1e-4;

/// Exact t-SNE to two dimensions. The initial layout is drawn from `seed` and
/// the optimization runs on one thread, so equal inputs give bit-identical
/// output. The affinity search needs at least `3 · perplexity` neighbours;
/// for very small inputs the perplexity is lowered to `(N − 1) / 3` with a
/// warning.
pub fn project_2d(x: &LatentMatrix, perplexity: f64, seed: u64) -> Result<Vec<[f64; 2]>, ClusterError> {
    let n = x.rows;
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(ClusterError::Config(format!("perplexity {perplexity} must be positive and below the point count {n}")));
    }
    if n == 1 {
        return Ok(vec![[0.0, 0.0]]);
    }
    let limit = (n - 1) as f64 / 3.0;
    let effective = if perplexity > limit {
        log::warn!("perplexity {perplexity} is too large for {n} points; using {limit:.3}");
        limit
    } else {
        perplexity
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid scale");
    let init: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let rows: Vec<&[f64]> = x.iter_rows().collect();
    // The embedding library reduces in parallel; one thread fixes the
    // summation order.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| ClusterError::Config(format!("cannot start t-SNE worker: {e}")))?;
    let y = pool.install(|| {
        let mut t: tSNE<f64, &[f64]> = tSNE::new(&rows);
        t.perplexity(effective)
            .initial_embedding(init)
            .exact(|a, b| a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum());
        t.embedding()
    });
    Ok(y.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// Scatter export with columns `x,y,cluster,pair_id`.
pub fn write_scatter_csv<W: Write>(out: W, points: &[[f64; 2]], clusters: &[usize], pair_ids: &[usize]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "cluster", "pair_id"])?;
    for ((p, c), id) in points.iter().zip(clusters).zip(pair_ids) {
        w.write_record([p[0].to_string(), p[1].to_string(), c.to_string(), id.to_string()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize) -> LatentMatrix {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 3) as f64 * 10.0 + i as f64 * 0.01, (i / 3) as f64]).collect();
        LatentMatrix::from_rows(&rows)
    }

    #[test]
    fn tiny_input_shape() {
        let y = project_2d(&data(3), 2.0, 1).unwrap();
        assert_eq!(y.len(), 3);
        assert!(y.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_layout() {
        let a = project_2d(&data(24), 5.0, 7).unwrap();
        let b = project_2d(&data(24), 5.0, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, project_2d(&data(24), 5.0, 8).unwrap());
    }

    #[test]
    fn perplexity_must_be_below_n() {
        assert!(matches!(project_2d(&data(5), 5.0, 0), Err(ClusterError::Config(_))));
        assert!(project_2d(&data(5), 0.0, 0).is_err());
    }
}
