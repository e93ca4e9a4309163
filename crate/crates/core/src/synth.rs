//! Deterministic synthetic data for tests, benches and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{AlignedPair, ModelConfig};
use crate::textprep::{embed_tokens, EmbeddedCaption, EmbeddingTable};

/// `n` random pairs matching `cfg`: smooth images in `[0,1]` and captions
/// with between 1 and `seq_len` real rows of values in `[-1, 1]`.
pub fn random_pairs(cfg: &ModelConfig, n: usize, seq_len: usize, seed: u64) -> Vec<AlignedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.image_hw;
    (0..n)
        .map(|id| {
            let phase: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let freq: f64 = rng.random_range(0.5..2.0);
            let mut image = Vec::with_capacity(3 * h * w);
            for (c, ph) in phase.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f64 / w as f64 + y as f64 / h as f64 + c as f64 * 0.3) * freq;
                        image.push(0.5 + 0.4 * (std::f64::consts::TAU * (u + ph)).sin());
                    }
                }
            }
            let real = rng.random_range(1..=seq_len);
            let e = cfg.embed_dim;
            let mut vectors = vec![0.0f32; seq_len * e];
            for v in &mut vectors[..real * e] {
                *v = rng.random_range(-1.0..1.0);
            }
            let mask = (0..seq_len).map(|i| i < real).collect();
            AlignedPair {
                pair_id: id,
                frame_timestamp_s: id as f64,
                segment_index: id,
                image,
                caption: EmbeddedCaption {
                    tokens: (0..real).map(|i| format!("w{i}")).collect(),
                    dim: e,
                    vectors,
                    mask,
                },
            }
        })
        .collect()
}

/// A small vocabulary with well-separated vectors and `n` pairs whose
/// captions are drawn from it. Used to check that training can memorize a
/// handful of items.
pub fn memorization_set(cfg: &ModelConfig, n: usize, max_len: usize, seed: u64) -> (Vec<AlignedPair>, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = [
        "city", "health", "officials", "virus", "torch", "relay", "stadium", "mask", "vaccine", "crowd", "river",
        "flag",
    ];
    let e = cfg.embed_dim;
    let entries: Vec<(String, Vec<f32>)> = words
        .iter()
        .map(|w| (w.to_string(), (0..e).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
        .collect();
    let table = EmbeddingTable::from_entries(e, "en", entries).expect("consistent dims");
    let images = random_pairs(cfg, n, 1, seed ^ 0x5eed);
    let pairs = images
        .into_iter()
        .map(|mut p| {
            let len = rng.random_range(max_len.div_ceil(2)..=max_len);
            let toks: Vec<String> = (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
            p.caption = embed_tokens(&toks, &table, max_len).expect("valid max_len");
            p
        })
        .collect();
    (pairs, table)
}
