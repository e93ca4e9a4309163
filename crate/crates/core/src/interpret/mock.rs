//! Deterministic in-process backends.
//!
//! They speak the same JSON contract as remote backends so the full
//! serialization path is exercised without a network. Their outputs are
//! simple functions of the request: color statistics for captions, frequent
//! words for tags, hashed character trigrams for phrase vectors.

use std::collections::HashMap;

use base64::Engine;

use super::backend::{CaptionRequest, ChatRequest, EmbedReply, EmbedRequest, TextReply, Transport, PHRASE_DIM};
use super::prompt::prompt_slots;
use super::tags::TAGS_PER_CLUSTER;
use super::InterpretError;
use crate::textprep::tokenize_en;

fn decode<'a, T: serde::Deserialize<'a>>(request: &'a [u8]) -> Result<T, InterpretError> {
    serde_json::from_slice(request).map_err(|e| InterpretError::Protocol(e.to_string()))
}

fn encode<T: serde::Serialize>(reply: &T) -> Result<Vec<u8>, InterpretError> {
    serde_json::to_vec(reply).map_err(|e| InterpretError::Protocol(e.to_string()))
}

/// Describes an image by brightness, dominant hue and vertical contrast.
pub struct MockVisionServer;

fn hue_name(r: f64, g: f64, b: f64) -> &'static str {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max - min < 0.08 {
        return "gray";
    }
    let h = if max == r {
        60.0 * (((g - b) / (max - min)).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / (max - min) + 2.0)
    } else {
        60.0 * ((r - g) / (max - min) + 4.0)
    };
    match h {
        h if h < 20.0 => "red",
        h if h < 45.0 => "orange",
        h if h < 70.0 => "yellow",
        h if h < 160.0 => "green",
        h if h < 200.0 => "teal",
        h if h < 260.0 => "blue",
        h if h < 320.0 => "purple",
        _ => "red",
    }
}

/// Caption text for an RGB image.
pub fn describe_image(img: &image::RgbImage) -> String {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return "an empty frame".into();
    }
    let mut sum = [0.0f64; 3];
    let (mut top, mut bottom) = (0.0, 0.0);
    for (_, y, p) in img.enumerate_pixels() {
        let px = [p[0], p[1], p[2]].map(|c| f64::from(c) / 255.0);
        for c in 0..3 {
            sum[c] += px[c];
        }
        let lum = (px[0] + px[1] + px[2]) / 3.0;
        if y < h / 2 {
            top += lum;
        } else {
            bottom += lum;
        }
    }
    let n = f64::from(w * h);
    let [r, g, b] = sum.map(|s| s / n);
    let lum = (r + g + b) / 3.0;
    let brightness = match lum {
        l if l < 0.3 => "dark",
        l if l < 0.55 => "dim",
        l if l < 0.75 => "bright",
        _ => "brilliant",
    };
    let half = f64::from(w * (h / 2).max(1));
    let contrast = top / half - bottom / f64::from(w * (h - h / 2)).max(1.0);
    let layout = if contrast > 0.1 {
        "a light sky above a darker ground"
    } else if contrast < -0.1 {
        "a dark ceiling above a lit floor"
    } else {
        "even lighting"
    };
    format!("a {brightness} {} scene with {layout}", hue_name(r, g, b))
}

impl Transport for MockVisionServer {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError> {
        let req: CaptionRequest = decode(request)?;
        let png = base64::engine::general_purpose::STANDARD
            .decode(&req.image_png_base64)
            .map_err(|e| InterpretError::Protocol(e.to_string()))?;
        let img = image::load_from_memory(&png).map_err(|e| InterpretError::Protocol(e.to_string()))?;
        let text = describe_image(&img.to_rgb8());
        let text = match req.prompt {
            Some(p) => format!("{p}{text}"),
            None => text,
        };
        encode(&TextReply { text })
    }
}

const STOPWORDS: &[&str] = &[
    "the", "and", "with", "for", "are", "was", "were", "this", "that", "from", "has", "have", "its", "their",
    "scene", "into", "over", "above", "been", "will", "they", "them", "there", "also", "but", "not",
];

fn content_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for token in tokenize_en(text) {
        if token.is_ascii() {
            if token.len() >= 3 && !STOPWORDS.contains(&token.as_str()) && !token.chars().all(|c| c.is_ascii_digit())
            {
                out.push(token);
            }
        } else {
            // Unsegmented scripts: character bigrams stand in for words.
            let chars: Vec<char> = token.chars().collect();
            if chars.len() < 3 {
                out.push(token);
            } else {
                out.extend(chars.windows(2).map(|w| w.iter().collect()));
            }
        }
    }
    out
}

fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn ranked_words(text: &str) -> Vec<String> {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for (i, w) in content_words(text).into_iter().enumerate() {
        counts.entry(w).or_insert((0, i)).0 += 1;
    }
    let mut words: Vec<(String, usize, usize)> = counts.into_iter().map(|(w, (c, i))| (w, c, i)).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    words.into_iter().map(|w| w.0).collect()
}

/// Caption words that may fill a tag list before description words join.
const CAPTION_SHARE: usize = 7;

/// Tags built from the most frequent words of the prompt's caption slot,
/// then of its description slot. Always yields ten distinct tags.
pub fn mock_tags(prompt: &str) -> Vec<String> {
    let (captions, descriptions) = prompt_slots(prompt).unwrap_or((prompt, ""));
    let mut words: Vec<String> = ranked_words(captions).into_iter().take(CAPTION_SHARE).collect();
    for w in ranked_words(descriptions).into_iter().chain(ranked_words(captions).into_iter().skip(CAPTION_SHARE)) {
        if !words.contains(&w) {
            words.push(w);
        }
    }

    let mut tags: Vec<String> = words.iter().take(TAGS_PER_CLUSTER).map(|w| capitalize(w)).collect();
    'pairs: for i in 0..words.len() {
        for j in i + 1..words.len() {
            if tags.len() >= TAGS_PER_CLUSTER {
                break 'pairs;
            }
            tags.push(capitalize(&format!("{} {}", words[i], words[j])));
        }
    }
    let mut n = 1;
    while tags.len() < TAGS_PER_CLUSTER {
        tags.push(format!("Scene detail {n}"));
        n += 1;
    }
    tags
}

/// Answers tag prompts with a numbered list from [`mock_tags`].
pub struct MockChatServer;

impl Transport for MockChatServer {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError> {
        let req: ChatRequest = decode(request)?;
        let mut text = String::from("Here are 10 short tags for these frames:\n");
        for (i, t) in mock_tags(&req.prompt).iter().enumerate() {
            text.push_str(&format!("{}. {t}\n", i + 1));
        }
        encode(&TextReply { text })
    }
}

/// Hashed character-trigram phrase vectors, L2-normalized. Phrases sharing
/// substrings get similar vectors; an empty phrase gets the zero vector.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedServer {
    pub dim: usize,
}

impl Default for MockEmbedServer {
    fn default() -> Self {
        Self { dim: PHRASE_DIM }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl MockEmbedServer {
    pub fn embed_phrase(&self, phrase: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let norm_text = phrase.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if norm_text.is_empty() || self.dim == 0 {
            return v;
        }
        let chars: Vec<char> = format!(" {norm_text} ").chars().collect();
        for w in chars.windows(3) {
            let s: String = w.iter().collect();
            let h = fnv1a(s.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

impl Transport for MockEmbedServer {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError> {
        let req: EmbedRequest = decode(request)?;
        encode(&EmbedReply { embeddings: req.inputs.iter().map(|p| self.embed_phrase(p)).collect() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::build_cluster_prompt;
    use crate::interpret::tags::parse_tags;

    #[test]
    fn describes_colors_and_layout() {
        let img = image::RgbImage::from_fn(8, 8, |_, y| if y < 4 { image::Rgb([250, 250, 250]) } else { image::Rgb([0, 0, 200]) });
        let d = describe_image(&img);
        assert!(d.contains("blue"), "{d}");
        assert!(d.contains("light sky"), "{d}");
        let gray = image::RgbImage::from_pixel(4, 4, image::Rgb([20, 20, 20]));
        assert_eq!(describe_image(&gray), "a dark gray scene with even lighting");
    }

    #[test]
    fn chat_reply_parses_to_ten_tags() {
        let p = build_cluster_prompt(&["officials wear masks", "masks everywhere"], &["a dim green scene"]).unwrap();
        let req = serde_json::to_vec(&ChatRequest { model: "m".into(), prompt: p, temperature: 0.9, max_tokens: 10 }).unwrap();
        let reply: TextReply = serde_json::from_slice(&MockChatServer.exchange(&req).unwrap()).unwrap();
        let tags = parse_tags(&reply.text);
        assert_eq!(tags.len(), 10);
        assert_eq!(tags[0], "Masks");
    }

    #[test]
    fn cjk_words_become_bigrams() {
        assert_eq!(content_words("新冠病毒"), ["新冠", "冠病", "病毒"]);
    }

    #[test]
    fn phrase_vectors_are_unit_and_deterministic() {
        let m = MockEmbedServer::default();
        let a = m.embed_phrase("Torch relay");
        assert_eq!(a.len(), PHRASE_DIM);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, m.embed_phrase("torch   relay"));
        assert!(m.embed_phrase("  ").iter().all(|&x| x == 0.0));
    }
}
