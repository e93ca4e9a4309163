//! Maps reconstructed embedding rows back to vocabulary words by
//! nearest-neighbor search over an embedding table.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::textprep::EmbeddingTable;

/// Entries scanned per parallel work item.
const SCAN_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 − cos`; zero vectors are at distance 1 from everything.
    Cosine,
}

/// Decoded caption for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizedText {
    pub source_pair_id: usize,
    pub tokens: Vec<String>,
    pub distances: Vec<f64>,
}

impl VerbalizedText {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Nearest-neighbor lookup over a table. With norm acceleration, squared
/// Euclidean distances are ranked as `‖t‖² − 2·v·t` from precomputed norms
/// and only near-minimal candidates are rescored exactly, so the answer is
/// identical to the plain scan.
pub struct WordIndex<'a> {
    table: &'a EmbeddingTable,
    metric: Metric,
    norms: Option<Vec<f64>>,
}

fn dist_exact(metric: Metric, v: &[f64], t: &[f32], v_norm: f64) -> f64 {
    match metric {
        Metric::Euclidean => v.iter().zip(t).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let (mut dot, mut tn) = (0.0, 0.0);
            for (a, &b) in v.iter().zip(t) {
                let b = f64::from(b);
                dot += a * b;
                tn += b * b;
            }
            if v_norm == 0.0 || tn == 0.0 {
                1.0
            } else {
                1.0 - dot / (v_norm * tn.sqrt())
            }
        }
    }
}

fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

impl<'a> WordIndex<'a> {
    pub fn new(table: &'a EmbeddingTable, metric: Metric) -> Self {
        Self { table, metric, norms: None }
    }

    pub fn with_norm_acceleration(table: &'a EmbeddingTable, metric: Metric) -> Self {
        let norms = (0..table.len())
            .map(|i| table.vector(i).iter().map(|&x| f64::from(x).powi(2)).sum())
            .collect();
        Self { table, metric, norms: Some(norms) }
    }

    pub fn table(&self) -> &EmbeddingTable {
        self.table
    }

    fn scan(&self, score: impl Fn(usize) -> f64 + Sync) -> (f64, usize) {
        let n = self.table.len();
        let chunks = n.div_ceil(SCAN_CHUNK);
        exec::map_range(chunks, |c| {
            let mut best = (f64::INFINITY, usize::MAX);
            for i in c * SCAN_CHUNK..((c + 1) * SCAN_CHUNK).min(n) {
                best = better(best, (score(i), i));
            }
            best
        })
        .into_iter()
        .fold((f64::INFINITY, usize::MAX), better)
    }

    /// Nearest entry as `(token, distance)`; ties go to the entry inserted
    /// first. Panics on an empty table.
    pub fn nearest(&self, v: &[f64]) -> (&'a str, f64) {
        assert!(!self.table.is_empty(), "nearest-word lookup needs a non-empty table");
        assert_eq!(v.len(), self.table.dim(), "query has the wrong dimension");
        let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let exact = |i: usize| dist_exact(self.metric, v, self.table.vector(i), v_norm);
        let (d, i) = match (&self.norms, self.metric) {
            (Some(norms), Metric::Euclidean) => {
                let approx = |i: usize| {
                    let dot: f64 = v.iter().zip(self.table.vector(i)).map(|(a, &b)| a * f64::from(b)).sum();
                    norms[i] - 2.0 * dot
                };
                let (best, _) = self.scan(approx);
                // Rounding in the expanded form is bounded well below this
                // slack; everything inside it is rescored exactly.
                let scale = v_norm * v_norm + norms.iter().fold(0.0f64, |m, &x| m.max(x));
                let slack = 1e-9 * (1.0 + scale);
                let mut out = (f64::INFINITY, usize::MAX);
                for i in 0..self.table.len() {
                    if approx(i) <= best + slack {
                        out = better(out, (exact(i), i));
                    }
                }
                out
            }
            _ => self.scan(exact),
        };
        (self.table.token(i), d)
    }
}

/// Exact Euclidean nearest word.
pub fn nearest_word<'a>(v: &[f64], table: &'a EmbeddingTable) -> (&'a str, f64) {
    WordIndex::new(table, Metric::Euclidean).nearest(v)
}

/// Decodes every masked-true row of `recon` (`mask.len() × dim`) and drops
/// padding rows.
pub fn verbalize_sequence(recon: &[f64], mask: &[bool], index: &WordIndex<'_>, pair_id: usize) -> VerbalizedText {
    let dim = index.table().dim();
    assert_eq!(recon.len(), mask.len() * dim, "reconstruction does not match the mask");
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let found = exec::map_slice(&rows, |&i| {
        let (t, d) = index.nearest(&recon[i * dim..(i + 1) * dim]);
        (t.to_string(), d)
    });
    let (tokens, distances) = found.into_iter().unzip();
    VerbalizedText { source_pair_id: pair_id, tokens, distances }
}

/// One line per caption: `pair_id<TAB>space-joined tokens`.
pub fn write_verbalized<W: Write>(mut out: W, items: &[VerbalizedText]) -> std::io::Result<()> {
    for v in items {
        writeln!(out, "{}\t{}", v.source_pair_id, v.text())?;
    }
    Ok(())
}
