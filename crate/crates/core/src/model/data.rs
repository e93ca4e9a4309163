use serde::{Deserialize, Serialize};

use crate::textprep::EmbeddedCaption;

/// One training unit: a frame in CHW layout with values in `[0,1]` and its
/// embedded caption.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub pair_id: usize,
    pub frame_timestamp_s: f64,
    pub segment_index: usize,
    /// `3 × height × width`
    pub image: Vec<f64>,
    pub caption: EmbeddedCaption,
}

/// Contiguous minibatch buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    /// `size × 3 × H × W`
    pub images: Vec<f64>,
    /// `size × seq_len × embed_dim`
    pub captions: Vec<f64>,
    /// `size × seq_len`, true for real tokens.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a AlignedPair>) -> Self {
        let mut b = Batch { size: 0, seq_len: 0, images: Vec::new(), captions: Vec::new(), mask: Vec::new() };
        for p in pairs {
            if b.size == 0 {
                b.seq_len = p.caption.max_len();
            }
            assert_eq!(p.caption.max_len(), b.seq_len, "captions in a batch must share max_len");
            b.images.extend_from_slice(&p.image);
            b.captions.extend(p.caption.vectors.iter().map(|&v| f64::from(v)));
            b.mask.extend_from_slice(&p.caption.mask);
            b.size += 1;
        }
        b
    }
}

/// Matrix of latent means, one row per pair in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub rows: usize,
    pub dim: usize,
    pub pair_ids: Vec<usize>,
    pub values: Vec<f64>,
}

impl LatentMatrix {
    pub fn empty(dim: usize) -> Self {
        Self { rows: 0, dim, pair_ids: Vec::new(), values: Vec::new() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim.max(1)).take(self.rows)
    }
}

impl LatentMatrix {
    /// Builds a matrix from equal-length rows; pair ids are `0..rows`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == dim), "rows must share one length");
        Self { rows: rows.len(), dim, pair_ids: (0..rows.len()).collect(), values: rows.concat() }
    }
}
