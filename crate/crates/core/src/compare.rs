//! Cross-video cluster comparison through tag-embedding similarity.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpret::{EmbedClient, InterpretError, TagSet};
use crate::plot::{self, PlotError};

/// Number of largest cosine values averaged into one cluster-pair score.
pub const TOP_PAIRS: usize = 10;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("phrase embedding failed: {0}")]
    Embedding(#[from] InterpretError),
    #[error("comparison contract violation: {0}")]
    Contract(String),
    #[error("malformed heatmap file {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagEmbedding {
    pub tag: String,
    pub vector: Vec<f64>,
}

/// Embeds tags in order. Transport failures are retried by the client and
/// then returned: similarities need every embedding.
pub fn embed_tags(tags: &[String], client: &EmbedClient) -> Result<Vec<TagEmbedding>, CompareError> {
    let vectors = client.embed(tags)?;
    Ok(tags.iter().cloned().zip(vectors).map(|(tag, vector)| TagEmbedding { tag, vector }).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Row-major `|a| × |b|` cosine matrix. Entries involving a zero vector are
/// 0 and produce a warning.
pub fn cosine_matrix<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Vec<f64> {
    let nb: Vec<f64> = b.iter().map(|v| norm(v.as_ref())).collect();
    let mut zero = 0usize;
    let mut out = Vec::with_capacity(a.len() * b.len());
    for u in a {
        let u = u.as_ref();
        let nu = norm(u);
        for (v, &nv) in b.iter().zip(&nb) {
            if nu == 0.0 || nv == 0.0 {
                zero += 1;
                out.push(0.0);
            } else {
                let dot: f64 = u.iter().zip(v.as_ref()).map(|(x, y)| x * y).sum();
                out.push((dot / (nu * nv)).clamp(-1.0, 1.0));
            }
        }
    }
    if zero > 0 {
        log::warn!("{zero} cosine entries involve a zero-norm vector and were set to 0");
    }
    out
}

/// Mean of the [`TOP_PAIRS`] largest cosine similarities between the two
/// sets, pooled over the whole matrix (all entries if there are fewer).
pub fn pair_similarity<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<f64, CompareError> {
    if a.is_empty() || b.is_empty() {
        return Err(CompareError::Contract("pair similarity needs two non-empty embedding sets".into()));
    }
    let mut cos = cosine_matrix(a, b);
    let k = TOP_PAIRS.min(cos.len());
    if k < cos.len() {
        cos.select_nth_unstable_by(k - 1, |x, y| y.total_cmp(x));
    }
    let mut top = cos[..k].to_vec();
    top.sort_by(|x, y| y.total_cmp(x));
    Ok(top.iter().sum::<f64>() / k as f64)
}

/// Similarities between the clusters of two runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarityMatrix {
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub row_clusters: Vec<usize>,
    pub col_clusters: Vec<usize>,
    /// `values[i][j]` compares row cluster `i` with column cluster `j`.
    pub values: Vec<Vec<f64>>,
}

impl PairSimilarityMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.row_names.len(), self.col_names.len())
    }

    pub fn row_max(&self, i: usize) -> f64 {
        self.values[i].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn col_max(&self, j: usize) -> f64 {
        self.values.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Reorders rows and columns by their best pair similarity, descending.
    /// Ties keep their previous order.
    pub fn sort_by_best(&mut self) {
        let (r, c) = self.shape();
        let mut ri: Vec<usize> = (0..r).collect();
        ri.sort_by(|&a, &b| self.row_max(b).total_cmp(&self.row_max(a)));
        let mut ci: Vec<usize> = (0..c).collect();
        ci.sort_by(|&a, &b| self.col_max(b).total_cmp(&self.col_max(a)));
        self.values = ri.iter().map(|&i| ci.iter().map(|&j| self.values[i][j]).collect()).collect();
        self.row_names = ri.iter().map(|&i| self.row_names[i].clone()).collect();
        self.row_clusters = ri.iter().map(|&i| self.row_clusters[i]).collect();
        self.col_names = ci.iter().map(|&j| self.col_names[j].clone()).collect();
        self.col_clusters = ci.iter().map(|&j| self.col_clusters[j]).collect();
    }

    /// True when row and column maxima are non-increasing.
    pub fn is_sorted(&self) -> bool {
        let (r, c) = self.shape();
        (1..r).all(|i| self.row_max(i - 1) >= self.row_max(i)) && (1..c).all(|j| self.col_max(j - 1) >= self.col_max(j))
    }
}

/// One side of a comparison: the tag sets of a run plus optional display
/// names keyed by cluster id. Unnamed clusters are shown as `label-id`.
pub struct ClusterSide<'a> {
    pub label: &'a str,
    pub tagsets: &'a [TagSet],
    pub names: &'a BTreeMap<usize, String>,
}

/// Embedded clusters of one side, ready for scoring.
pub struct EmbeddedSide {
    pub clusters: Vec<usize>,
    pub names: Vec<String>,
    pub vectors: Vec<Vec<Vec<f64>>>,
}

fn embed_side(side: &ClusterSide, client: &EmbedClient) -> Result<EmbeddedSide, CompareError> {
    let mut out = EmbeddedSide { clusters: Vec::new(), names: Vec::new(), vectors: Vec::new() };
    for ts in side.tagsets {
        if !ts.interpreted {
            log::warn!("{}: cluster {} is uninterpreted and left out of the comparison", side.label, ts.cluster_id);
            continue;
        }
        let emb = embed_tags(&ts.tags, client)?;
        out.clusters.push(ts.cluster_id);
        out.names.push(
            side.names.get(&ts.cluster_id).cloned().unwrap_or_else(|| format!("{}-{}", side.label, ts.cluster_id)),
        );
        out.vectors.push(emb.into_iter().map(|e| e.vector).collect());
    }
    Ok(out)
}

/// Scores every row cluster against every column cluster and sorts the
/// result.
pub fn similarity_from_embeddings(rows: &EmbeddedSide, cols: &EmbeddedSide) -> Result<PairSimilarityMatrix, CompareError> {
    if rows.clusters.is_empty() || cols.clusters.is_empty() {
        return Err(CompareError::Contract("no interpreted clusters on one side of the comparison".into()));
    }
    let values = rows
        .vectors
        .iter()
        .map(|a| cols.vectors.iter().map(|b| pair_similarity(a, b)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut m = PairSimilarityMatrix {
        row_names: rows.names.clone(),
        col_names: cols.names.clone(),
        row_clusters: rows.clusters.clone(),
        col_clusters: cols.clusters.clone(),
        values,
    };
    m.sort_by_best();
    Ok(m)
}

/// Embeds both sides' tags and builds the sorted similarity matrix.
/// Uninterpreted clusters are skipped with a warning.
pub fn similarity_matrix(
    a: &ClusterSide,
    b: &ClusterSide,
    client: &EmbedClient,
) -> Result<PairSimilarityMatrix, CompareError> {
    similarity_from_embeddings(&embed_side(a, client)?, &embed_side(b, client)?)
}

/// CSV with a header row and column of cluster names and 4-decimal cells.
pub fn write_heatmap_csv<W: Write>(mut out: W, seed: u64, m: &PairSimilarityMatrix) -> Result<(), CompareError> {
    writeln!(out, "# seed={seed}")?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cluster".to_string()];
    header.extend(m.col_names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.row_names.iter().zip(&m.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Row names, column names and cell values of a heatmap table.
pub type HeatmapTable = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

/// Reads a heatmap CSV back as `(row names, column names, values)`.
pub fn read_heatmap_csv(path: &Path) -> Result<HeatmapTable, CompareError> {
    let bad = |message: String| CompareError::Format { path: path.display().to_string(), message };
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let cols: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.get(0).unwrap_or_default().to_string());
        let vals = rec
            .iter()
            .skip(1)
            .map(|c| c.parse::<f64>().map_err(|e| bad(format!("{c:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != cols.len() {
            return Err(bad(format!("row {} has {} cells, expected {}", rows.len(), vals.len(), cols.len())));
        }
        values.push(vals);
    }
    Ok((rows, cols, values))
}

/// Writes `<stem>.csv`, the full-precision `<stem>.json` and the rendered
/// `<stem>.svg` into `dir`.
pub fn export_heatmap(m: &PairSimilarityMatrix, seed: u64, dir: &Path, stem: &str, title: &str) -> Result<(), CompareError> {
    if m.values.is_empty() || m.col_names.is_empty() {
        return Err(CompareError::Contract("cannot export an empty heatmap".into()));
    }
    std::fs::create_dir_all(dir)?;
    write_heatmap_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?, seed, m)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(m)?)?;
    plot::heatmap(&dir.join(format!("{stem}.svg")), title, &m.row_names, &m.col_names, &m.values)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn identical_sets_score_one() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| basis(i, 20)).collect();
        assert!((pair_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_sets_score_zero() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| basis(i, 20)).collect();
        let b: Vec<Vec<f64>> = (10..20).map(|i| basis(i, 20)).collect();
        assert_eq!(pair_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn fewer_than_ten_entries_average_all() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![1.0, 1.0]];
        let s = pair_similarity(&a, &b).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_counts_as_zero() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![1.0, 0.0]];
        assert_eq!(cosine_matrix(&a, &b), [0.0]);
        assert!(pair_similarity(&[] as &[Vec<f64>], &b).is_err());
    }

    fn side(n: usize, offset: usize) -> EmbeddedSide {
        EmbeddedSide {
            clusters: (0..n).collect(),
            names: (0..n).map(|i| format!("c{i}")).collect(),
            vectors: (0..n).map(|i| vec![basis(i + offset, 8), basis((i + 1) % 8, 8)]).collect(),
        }
    }

    #[test]
    fn matrix_is_sorted_and_shaped() {
        let m = similarity_from_embeddings(&side(3, 0), &side(5, 1)).unwrap();
        assert_eq!(m.shape(), (3, 5));
        assert!(m.is_sorted());
        assert!(m.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        let one = similarity_from_embeddings(&side(1, 0), &side(1, 0)).unwrap();
        // Two orthonormal tags on each side: four cosines, two of them 1.
        assert_eq!(one.values, [[0.5]]);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let m = similarity_from_embeddings(&side(3, 0), &side(5, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_heatmap(&m, 9, dir.path(), "heatmap", "test").unwrap();
        let (rows, cols, vals) = read_heatmap_csv(&dir.path().join("heatmap.csv")).unwrap();
        assert_eq!((rows, cols), (m.row_names.clone(), m.col_names.clone()));
        for (r, s) in vals.iter().zip(&m.values) {
            for (x, y) in r.iter().zip(s) {
                assert!((x - y).abs() <= 5e-5);
            }
        }
        let back: PairSimilarityMatrix =
            serde_json::from_slice(&std::fs::read(dir.path().join("heatmap.json")).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(dir.path().join("heatmap.svg").exists());
    }

    fn vecs(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), 1..=n)
    }

    proptest! {
        #[test]
        fn symmetric(a in vecs(10, 6), b in vecs(10, 6)) {
            let ab = pair_similarity(&a, &b).unwrap();
            let ba = pair_similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn scale_invariant(a in vecs(10, 6), b in vecs(10, 6), c in 0.01f64..100.0, i in 0usize..10) {
            let before = pair_similarity(&a, &b).unwrap();
            let mut a2 = a.clone();
            let k = i % a2.len();
            a2[k].iter_mut().for_each(|x| *x *= c);
            prop_assert!((pair_similarity(&a2, &b).unwrap() - before).abs() < 1e-9);
        }

        #[test]
        fn sorting_only_permutes(a in vecs(5, 4), b in vecs(5, 4)) {
            let rows = EmbeddedSide { clusters: (0..a.len()).collect(), names: (0..a.len()).map(|i| i.to_string()).collect(), vectors: a.iter().map(|v| vec![v.clone()]).collect() };
            let cols = EmbeddedSide { clusters: (0..b.len()).collect(), names: (0..b.len()).map(|i| i.to_string()).collect(), vectors: b.iter().map(|v| vec![v.clone()]).collect() };
            let m = similarity_from_embeddings(&rows, &cols).unwrap();
            prop_assert!(m.is_sorted());
            let mut got: Vec<f64> = m.values.iter().flatten().copied().collect();
            let mut want: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| pair_similarity(&[x], &[y]).unwrap())).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            prop_assert_eq!(got, want);
        }
    }
}
