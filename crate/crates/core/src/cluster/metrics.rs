use super::kmeans::{kmeans, sq_dist, Clustering};
use super::ClusterError;
use crate::model::LatentMatrix;

/// Mean Euclidean distance from each point to its own centroid.
pub fn avg_intra_distance(c: &Clustering, x: &LatentMatrix) -> f64 {
    if x.rows == 0 {
        return 0.0;
    }
    (0..x.rows).map(|i| sq_dist(x.row(i), c.centroid(c.assignments[i])).sqrt()).sum::<f64>() / x.rows as f64
}

/// Mean Euclidean distance over distinct centroid pairs; `None` for K < 2.
pub fn avg_cross_distance(c: &Clustering) -> Option<f64> {
    if c.k < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for a in 0..c.k {
        for b in a + 1..c.k {
            sum += sq_dist(c.centroid(a), c.centroid(b)).sqrt();
            n += 1;
        }
    }
    Some(sum / n as f64)
}

/// Fraction of point pairs on whose co-membership two partitions agree
/// (Rand index). 1.0 when there are fewer than two points.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same points");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

/// Pair-counting agreement between the K and K+1 fits.
pub fn robustness(x: &LatentMatrix, k: usize, seed: u64, restarts: usize) -> Result<f64, ClusterError> {
    if k + 1 > x.rows {
        return Err(ClusterError::Config(format!("robustness at K = {k} needs at least {} points", k + 1)));
    }
    let a = kmeans(x, k, seed, restarts)?;
    let b = kmeans(x, k + 1, seed, restarts)?;
    Ok(rand_index(&a.assignments, &b.assignments))
}
