use std::io::Write;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, Clustering};
use super::metrics::{avg_cross_distance, avg_intra_distance, rand_index};
use super::ClusterError;
use crate::exec;
use crate::model::LatentMatrix;

pub const DEFAULT_K_MIN: usize = 2;
pub const DEFAULT_K_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub avg_intra: f64,
    /// Absent for K = 1.
    pub avg_cross: Option<f64>,
    /// Agreement with the K+1 fit; absent when K+1 exceeds the point count.
    pub robustness: Option<f64>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepReport {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Fits every K in `k_min..=k_max` (plus K+1 for the robustness column).
pub fn sweep_k(x: &LatentMatrix, k_min: usize, k_max: usize, seed: u64, restarts: usize) -> Result<KSweepReport, ClusterError> {
    if k_min == 0 || k_min > k_max || k_max > x.rows {
        return Err(ClusterError::Config(format!(
            "K range [{k_min}, {k_max}] must satisfy 1 ≤ k_min ≤ k_max ≤ number of points ({})",
            x.rows
        )));
    }
    let top = (k_max + 1).min(x.rows);
    let ks: Vec<usize> = (k_min..=top).collect();
    let fits: Vec<Clustering> =
        exec::map_slice(&ks, |&k| kmeans(x, k, seed, restarts)).into_iter().collect::<Result<_, _>>()?;
    let rows = (k_min..=k_max)
        .map(|k| {
            let c = &fits[k - k_min];
            SweepRow {
                k,
                avg_intra: avg_intra_distance(c, x),
                avg_cross: avg_cross_distance(c),
                robustness: fits.get(k + 1 - k_min).map(|next| rand_index(&c.assignments, &next.assignments)),
                sizes: c.sizes(),
            }
        })
        .collect();
    Ok(KSweepReport { seed, rows })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// CSV with columns `K,avg_intra,avg_cross,robustness,sizes`; sizes are
/// semicolon-joined and absent metrics are empty cells.
pub fn write_sweep_csv<W: Write>(out: W, report: &KSweepReport) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["K", "avg_intra", "avg_cross", "robustness", "sizes"])?;
    for r in &report.rows {
        let sizes = r.sizes.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        w.write_record([r.k.to_string(), r.avg_intra.to_string(), opt(r.avg_cross), opt(r.robustness), sizes])?;
    }
    w.flush()
}
