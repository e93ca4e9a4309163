//! Generator for the bundled two-video mini dataset.
//!
//! Both videos cover the same four topics (clinic, stadium, city, river),
//! one narrated in English with a timed-JSON transcript and one in Chinese
//! with a `[MM:SS]` transcript. Each topic has its own frame palette and
//! vocabulary cluster in the word-vector tables, so the pipeline has real
//! structure to find. Everything is a pure function of fixed seeds.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Source frame size; the pipeline resizes to the model's input size.
pub const MINI_FRAME_HW: (u32, u32) = (48, 80);
pub const MINI_EMBED_DIM: usize = 16;
pub const MINI_EN_FRAMES: usize = 32;
pub const MINI_EN_RATE_S: f64 = 2.0;
pub const MINI_ZH_FRAMES: usize = 42;
pub const MINI_ZH_RATE_S: f64 = 2.5;

const EN_WORDS: [[&str; 8]; 4] = [
    ["hospital", "nurse", "vaccine", "mask", "virus", "doctor", "patients", "test"],
    ["stadium", "torch", "relay", "athletes", "crowd", "medal", "runner", "flag"],
    ["city", "officials", "street", "lockdown", "traffic", "mayor", "shops", "police"],
    ["river", "boat", "bridge", "water", "flood", "rain", "village", "rescue"],
];
const EN_FILLERS: [&str; 6] = ["the", "a", "in", "of", "and", "at"];

const ZH_WORDS: [[&str; 8]; 4] = [
    ["医院", "护士", "疫苗", "口罩", "病毒", "医生", "病人", "检测"],
    ["体育场", "火炬", "传递", "运动员", "观众", "奖牌", "跑步", "国旗"],
    ["城市", "官员", "街道", "封锁", "交通", "市长", "商店", "警察"],
    ["河流", "船只", "桥梁", "水位", "洪水", "降雨", "村庄", "救援"],
];

/// Topic shown in each 4-frame block, cycling.
const TOPIC_CYCLE: [usize; 8] = [0, 1, 2, 0, 3, 1, 2, 3];

fn topic_of_frame(i: usize) -> usize {
    TOPIC_CYCLE[(i / 4) % TOPIC_CYCLE.len()]
}

fn frame_image(topic: usize, rng: &mut ChaCha8Rng) -> image::RgbImage {
    let (h, w) = MINI_FRAME_HW;
    let base: [[f64; 3]; 4] = [[0.86, 0.9, 0.95], [0.22, 0.62, 0.26], [0.46, 0.46, 0.5], [0.1, 0.35, 0.62]];
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    image::RgbImage::from_fn(w, h, |x, y| {
        let (u, v) = (f64::from(x) / f64::from(w), f64::from(y) / f64::from(h));
        let pattern = match topic {
            0 => 0.06 * (u * 18.0 + phase).sin(),
            1 if v < 0.35 => 0.3,
            1 => 0.05 * (v * 25.0 + phase).sin(),
            2 => 0.12 * ((u * 10.0).floor() % 2.0) - 0.06,
            _ => 0.08 * ((u + v) * 14.0 + phase).sin(),
        };
        let c = base[topic];
        let mut px = |k: usize| {
            let noise: f64 = rng.random_range(-0.03..0.03);
            ((c[k] + pattern + noise).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn write_frames(dir: &Path, count: usize, seed: u64) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        frame_image(topic_of_frame(i), &mut rng)
            .save(dir.join(format!("frame_{i:03}.png")))
            .map_err(std::io::Error::other)?;
    }
    Ok(())
}

fn vector_line(token: &str, v: &[f64]) -> String {
    let mut s = token.to_string();
    for x in v {
        let _ = write!(s, " {x:.5}");
    }
    s.push('\n');
    s
}

fn topic_centres(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..4).map(|_| (0..MINI_EMBED_DIM).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

fn near(centre: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    centre.iter().map(|c| { let e: f64 = StandardNormal.sample(rng); c + spread * e }).collect()
}

fn english(root: &Path) -> std::io::Result<()> {
    write_frames(&root.join("frames"), MINI_EN_FRAMES, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let centres = topic_centres(&mut rng);
    let mut table = String::new();
    for (t, words) in EN_WORDS.iter().enumerate() {
        for w in words {
            table.push_str(&vector_line(w, &near(&centres[t], 0.45, &mut rng)));
        }
    }
    for w in EN_FILLERS {
        table.push_str(&vector_line(w, &near(&[0.0; MINI_EMBED_DIM], 0.3, &mut rng)));
    }
    std::fs::write(root.join("vectors.txt"), table)?;

    let duration = MINI_EN_FRAMES as f64 * MINI_EN_RATE_S;
    let mut records = Vec::new();
    let mut i = 0;
    loop {
        let start = (i as f64 * 4.0 + rng.random_range(-0.6..0.6)).max(0.0);
        if start >= duration - 2.0 {
            break;
        }
        let topic = topic_of_frame((start / MINI_EN_RATE_S).round() as usize);
        let n = rng.random_range(4..=6);
        let mut words: Vec<&str> = Vec::new();
        for j in 0..n {
            if j % 3 == 1 {
                words.push(EN_FILLERS[rng.random_range(0..EN_FILLERS.len())]);
            } else {
                words.push(EN_WORDS[topic][rng.random_range(0..8)]);
            }
        }
        let mut text = words.join(" ");
        if let Some(f) = text.get_mut(0..1) {
            f.make_ascii_uppercase();
        }
        text.push('.');
        records.push(format!(
            "  {{\"text\": {}, \"start\": {:.2}, \"duration\": 4.0}}",
            serde_json::to_string(&text).map_err(std::io::Error::other)?,
            start
        ));
        i += 1;
    }
    std::fs::write(root.join("transcript.json"), format!("[\n{}\n]\n", records.join(",\n")))?;
    std::fs::write(root.join("config.toml"), format!("{EN_CONFIG_HEAD}{MODEL_SECTION}"))
}

fn chinese(root: &Path) -> std::io::Result<()> {
    write_frames(&root.join("frames"), MINI_ZH_FRAMES, 21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let centres = topic_centres(&mut rng);
    let mut table = String::new();
    let mut chars_seen = std::collections::BTreeSet::new();
    let mut char_lines = String::new();
    for (t, words) in ZH_WORDS.iter().enumerate() {
        for w in words {
            let v = near(&centres[t], 0.45, &mut rng);
            table.push_str(&vector_line(w, &v));
            for c in w.chars() {
                if chars_seen.insert(c) {
                    char_lines.push_str(&vector_line(&c.to_string(), &near(&v, 0.2, &mut rng)));
                }
            }
        }
    }
    table.push_str(&char_lines);
    std::fs::write(root.join("vectors.txt"), table)?;

    // Keep 5 of every 21 frames: local offsets 2, 6, 10, 14, 18.
    let kept: Vec<usize> = (0..MINI_ZH_FRAMES).filter(|i| [2, 6, 10, 14, 18].contains(&(i % 21))).collect();
    let mut text = String::new();
    for (k, &f) in kept.iter().enumerate() {
        let topic = topic_of_frame(f);
        let n = rng.random_range(3..=5);
        let sentence: String = (0..n).map(|_| ZH_WORDS[topic][rng.random_range(0..8)]).collect();
        let t = k * 10;
        let _ = writeln!(text, "[{:02}:{:02}] {sentence}。", t / 60, t % 60);
    }
    std::fs::write(root.join("transcript.txt"), text)?;
    std::fs::write(root.join("config.toml"), format!("{ZH_CONFIG_HEAD}{MODEL_SECTION}"))
}

/// Writes `en/` and `zh/` under `root`.
pub fn write_mini_dataset(root: &Path) -> std::io::Result<()> {
    english(&root.join("en"))?;
    chinese(&root.join("zh"))
}

const MODEL_SECTION: &str = r#"[model]
image_hw = [24, 40]
channels = 8
lstm_hidden = 16
embed_dim = 16
mid_dim = 64
latent_dim = 16
epochs = 40
batch_size = 8
lr = 0.002
"#;

const EN_CONFIG_HEAD: &str = r#"# English half of the mini dataset: frames every 2 s, timed-JSON transcript,
# nearest-frame alignment.
seed = 0
language = "en"
label = "en"

[data]
frames = { directory = "frames" }
rate_s = 2.0
transcript = "transcript.json"
embeddings = ["vectors.txt"]
max_len = 8
alignment = "timestamp"

[cluster]
k_min = 2
k_max = 6
k = 4
perplexity = 5.0

[compare]
other_config = "../zh/config.toml"

"#;

const ZH_CONFIG_HEAD: &str = r#"# Chinese half of the mini dataset: frames every 2.5 s, [MM:SS] transcript,
# 5-of-21 uniform alignment.
seed = 0
language = "zh"
label = "zh"

[data]
frames = { directory = "frames" }
rate_s = 2.5
transcript = "transcript.txt"
embeddings = ["vectors.txt"]
max_len = 8
alignment = { uniform = { keep = 5, window = 21 } }

[cluster]
k_min = 2
k_max = 5
k = 3
perplexity = 3.0

"#;
