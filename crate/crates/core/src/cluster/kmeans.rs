use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::exec;
use crate::model::LatentMatrix;

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_ITERATIONS: usize = 300;

/// A fitted K-means partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub dim: usize,
    pub assignments: Vec<usize>,
    /// `k × dim`
    pub centroids: Vec<f64>,
    /// Sum of squared point-to-centroid distances.
    pub inertia: f64,
    pub seed: u64,
    /// Inertia after every assignment step of the winning run.
    pub inertia_trace: Vec<f64>,
}

impl Clustering {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    /// Member indices of cluster `c` in point order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == c).collect()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to the squared
/// distance to the nearest chosen centre.
fn seed_centroids(x: &LatentMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.rows;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // Guard against rounding running past the last positive weight.
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).expect("positive total");
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    chosen.iter().flat_map(|&i| x.row(i).to_vec()).collect()
}

fn inertia(x: &LatentMatrix, assign: &[usize], centroids: &[f64]) -> f64 {
    (0..x.rows).map(|i| sq_dist(x.row(i), &centroids[assign[i] * x.dim..(assign[i] + 1) * x.dim])).sum()
}

fn lloyd(x: &LatentMatrix, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let (n, dim) = (x.rows, x.dim);
    let mut centroids = seed_centroids(x, k, rng);
    let mut assign: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let found: Vec<(usize, f64)> = (0..n).map(|i| nearest(x.row(i), &centroids, dim)).collect();
        let mut next: Vec<usize> = found.iter().map(|f| f.0).collect();
        let mut cost: Vec<f64> = found.iter().map(|f| f.1).collect();
        // Repair empty clusters with the point farthest from its centroid
        // among clusters that can spare one.
        loop {
            let mut sizes = vec![0usize; k];
            next.iter().for_each(|&a| sizes[a] += 1);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            let donor = (0..n)
                .filter(|&i| sizes[next[i]] > 1)
                .max_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(b.cmp(&a)))
                .expect("k ≤ n leaves a cluster with two or more points");
            next[donor] = empty;
            cost[donor] = 0.0;
            centroids[empty * dim..(empty + 1) * dim].copy_from_slice(x.row(donor));
        }
        trace.push(inertia(x, &next, &centroids));
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            for j in 0..dim {
                centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
    }
    (assign, centroids, trace)
}

/// Lloyd's algorithm from k-means++ seeds; the best of `restarts` runs by
/// inertia wins (ties go to the lower restart index). Restart `r` draws from
/// stream `r` of a generator seeded with `seed`.
pub fn kmeans(x: &LatentMatrix, k: usize, seed: u64, restarts: usize) -> Result<Clustering, ClusterError> {
    if k == 0 || k > x.rows {
        return Err(ClusterError::Config(format!("K = {k} must be between 1 and the number of points ({})", x.rows)));
    }
    let runs = exec::map_range(restarts.max(1), |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let (assign, centroids, trace) = lloyd(x, k, &mut rng);
        let i = inertia(x, &assign, &centroids);
        (i, assign, centroids, trace)
    });
    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.0 < runs[best].0 {
            best = r;
        }
    }
    let (inertia, assignments, centroids, inertia_trace) = runs.into_iter().nth(best).expect("at least one run");
    Ok(Clustering { k, dim: x.dim, assignments, centroids, inertia, seed, inertia_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four() -> LatentMatrix {
        LatentMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]])
    }

    #[test]
    fn separates_two_pairs() {
        let c = kmeans(&four(), 2, 0, 5).unwrap();
        assert_eq!(c.assignments[0], c.assignments[1]);
        assert_eq!(c.assignments[2], c.assignments[3]);
        assert_ne!(c.assignments[0], c.assignments[2]);
        assert_eq!(c.centroid(c.assignments[0]), &[0.0, 0.5]);
        assert_eq!(c.centroid(c.assignments[2]), &[10.0, 10.5]);
        assert!((c.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let c = kmeans(&four(), 1, 0, 3).unwrap();
        assert_eq!(c.centroids, vec![5.0, 5.5]);
    }

    #[test]
    fn k_above_n_is_rejected() {
        assert!(matches!(kmeans(&four(), 5, 0, 1), Err(ClusterError::Config(_))));
        assert!(kmeans(&four(), 0, 0, 1).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let x = LatentMatrix::from_rows(&vec![vec![1.0, 1.0]; 5]);
        let c = kmeans(&x, 3, 4, 3).unwrap();
        assert!(c.sizes().iter().all(|&s| s > 0));
        assert_eq!(c.inertia, 0.0);
    }

    proptest! {
        #[test]
        fn fit_invariants(
            pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..40),
            k_frac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let x = LatentMatrix::from_rows(&pts);
            let k = 1 + ((x.rows - 1) as f64 * k_frac) as usize;
            let c = kmeans(&x, k, seed, 3).unwrap();
            prop_assert!(c.sizes().iter().all(|&s| s > 0));
            for w in c.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            for i in 0..x.rows {
                let own = sq_dist(x.row(i), c.centroid(c.assignments[i]));
                for j in 0..k {
                    prop_assert!(own <= sq_dist(x.row(i), c.centroid(j)) * (1.0 + 1e-12) + 1e-12);
                }
            }
            prop_assert_eq!(c.clone(), kmeans(&x, k, seed, 3).unwrap());
        }
    }
}
