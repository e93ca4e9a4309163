//! Cluster interpretation: per-frame captions from a vision model and
//! per-cluster tag lists from a chat model.

mod backend;
mod mock;
mod prompt;
mod tags;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendConfig, BackendKind, BackendRole, CaptionClient, CaptionRequest, ChatClient, ChatRequest, CommandTransport,
    EmbedClient, EmbedReply, EmbedRequest, FnTransport, HttpTransport, RecordingTransport, RetryPolicy, TextReply,
    Transport, PHRASE_DIM,
};
pub use mock::{describe_image, mock_tags, MockChatServer, MockEmbedServer, MockVisionServer};
pub use prompt::{build_cluster_prompt, prompt_slots, CAPTION_PREFIX, TAG_SYSTEM_BLOCK};
pub use tags::{parse_tags, parse_tags_loose, TAGS_PER_CLUSTER};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed backend reply: {0}")]
    Protocol(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty caption for pair {0}")]
    EmptyCaption(usize),
    #[error("image encoding failed: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Caption of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDescription {
    pub pair_id: usize,
    /// The description proper. In conditional mode this is the text after
    /// the prompt prefix.
    pub caption: String,
    /// The backend reply exactly as received.
    pub raw_response: String,
    pub model_id: String,
    pub conditional: bool,
}

/// Captions one PNG-encoded frame. Conditional mode sends
/// [`CAPTION_PREFIX`] as the prompt; a reply that repeats the prefix has it
/// removed from `caption` (case-insensitively) but kept in `raw_response`.
pub fn describe_frame(
    pair_id: usize,
    png: &[u8],
    client: &CaptionClient,
    conditional: bool,
) -> Result<FrameDescription, InterpretError> {
    let prompt = conditional.then_some(CAPTION_PREFIX);
    let raw = client.caption(png, prompt)?;
    let caption = if conditional {
        let n = CAPTION_PREFIX.len();
        match raw.get(..n) {
            Some(head) if head.eq_ignore_ascii_case(CAPTION_PREFIX) => raw[n..].trim().to_string(),
            _ => raw.trim().to_string(),
        }
    } else {
        raw.trim().to_string()
    };
    if caption.is_empty() {
        return Err(InterpretError::EmptyCaption(pair_id));
    }
    Ok(FrameDescription { pair_id, caption, raw_response: raw, model_id: client.model.clone(), conditional })
}

/// Captions many frames with at most `max_in_flight` concurrent requests.
/// Failures are logged and returned separately; they never abort the batch.
pub fn describe_frames(
    frames: &[(usize, Vec<u8>)],
    client: &CaptionClient,
    conditional: bool,
    max_in_flight: usize,
) -> (Vec<FrameDescription>, Vec<(usize, String)>) {
    let results = crate::exec::map_slice_limited(frames, max_in_flight, |(id, png)| {
        describe_frame(*id, png, client, conditional).map_err(|e| (*id, e.to_string()))
    });
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(d) => ok.push(d),
            Err((id, e)) => {
                log::warn!("no description for pair {id}: {e}");
                failed.push((id, e));
            }
        }
    }
    (ok, failed)
}

/// Encodes an RGB image as PNG.
pub fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>, InterpretError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageOutputFormat::Png).map_err(|e| InterpretError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Where a tag came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagOrigin {
    /// A list item of a well-formed reply.
    Listed,
    /// Recovered by the looser comma/semicolon split.
    Padded,
}

/// Tags of one cluster, or the evidence of why there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSet {
    pub cluster_id: usize,
    /// Exactly [`TAGS_PER_CLUSTER`] entries when `interpreted`.
    pub tags: Vec<String>,
    pub origins: Vec<TagOrigin>,
    /// Every reply received, in request order.
    pub raw_responses: Vec<String>,
    pub interpreted: bool,
}

impl TagSet {
    pub fn raw_response(&self) -> String {
        self.raw_responses.join("\n")
    }
}

/// Queries the chat model for a cluster's tags. A reply with fewer than ten
/// distinct list items triggers up to `rerequests` further requests; after
/// that, items from all replies are pooled and padded with the loose parse.
/// If ten tags still cannot be found the set is marked uninterpreted, with
/// the replies kept for inspection.
pub fn generate_tags(cluster_id: usize, prompt: &str, client: &ChatClient, rerequests: usize) -> TagSet {
    let mut responses = Vec::new();
    let mut best: Vec<String> = Vec::new();
    for attempt in 0..=rerequests {
        match client.complete(prompt) {
            Ok(reply) => {
                let tags = parse_tags(&reply);
                responses.push(reply);
                if tags.len() >= TAGS_PER_CLUSTER {
                    let tags: Vec<String> = tags.into_iter().take(TAGS_PER_CLUSTER).collect();
                    return TagSet {
                        cluster_id,
                        origins: vec![TagOrigin::Listed; tags.len()],
                        tags,
                        raw_responses: responses,
                        interpreted: true,
                    };
                }
                log::warn!(
                    "cluster {cluster_id}: reply {} has {} usable tags, expected {TAGS_PER_CLUSTER}",
                    attempt + 1,
                    tags.len()
                );
                if tags.len() > best.len() {
                    best = tags;
                }
            }
            Err(e) => log::warn!("cluster {cluster_id}: chat request failed: {e}"),
        }
    }

    let mut tags = best;
    let mut origins = vec![TagOrigin::Listed; tags.len()];
    for reply in &responses {
        for t in parse_tags_loose(reply) {
            if tags.len() >= TAGS_PER_CLUSTER {
                break;
            }
            if !tags.iter().any(|x| x.to_lowercase() == t.to_lowercase()) {
                tags.push(t);
                origins.push(TagOrigin::Padded);
            }
        }
    }
    let interpreted = tags.len() == TAGS_PER_CLUSTER;
    if !interpreted {
        log::warn!("cluster {cluster_id} left uninterpreted: only {} tags after padding", tags.len());
    }
    TagSet { cluster_id, tags, origins, raw_responses: responses, interpreted }
}

/// Writes `pair_id,caption` rows after a `# seed=` comment line.
pub fn write_descriptions_csv<W: Write>(mut out: W, seed: u64, rows: &[FrameDescription]) -> Result<(), InterpretError> {
    writeln!(out, "# seed={seed}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair_id", "caption"])?;
    for r in rows {
        w.write_record([r.pair_id.to_string(), r.caption.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_descriptions_csv(path: &Path) -> Result<Vec<(usize, String)>, InterpretError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let (id, caption): (usize, String) = rec?;
        out.push((id, caption));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn text_reply(t: &str) -> Result<Vec<u8>, InterpretError> {
        Ok(serde_json::to_vec(&TextReply { text: t.to_string() }).unwrap())
    }

    fn chat_with(replies: Vec<&'static str>) -> ChatClient {
        let i = AtomicUsize::new(0);
        let t = FnTransport(move |_: &[u8]| {
            let k = i.fetch_add(1, Ordering::SeqCst).min(replies.len() - 1);
            text_reply(replies[k])
        });
        ChatClient::new(Arc::new(t), "scripted", 0.9, 100, RetryPolicy::none()).unwrap()
    }

    fn png() -> Vec<u8> {
        encode_png(&image::RgbImage::from_pixel(4, 4, image::Rgb([10, 200, 10]))).unwrap()
    }

    #[test]
    fn constant_reply_is_stored_verbatim() {
        let t = Arc::new(FnTransport(|_: &[u8]| text_reply("A person in a lab holding a bottle")));
        let client = CaptionClient::new(t, "echo", RetryPolicy::none());
        let d = describe_frame(3, &png(), &client, false).unwrap();
        assert_eq!(d.caption, "A person in a lab holding a bottle");
        assert_eq!(d.raw_response, d.caption);
        assert_eq!((d.pair_id, d.model_id.as_str(), d.conditional), (3, "echo", false));
    }

    #[test]
    fn conditional_caption_starts_after_prefix() {
        let client = BackendConfig::default().caption_client().unwrap();
        let d = describe_frame(0, &png(), &client, true).unwrap();
        assert!(d.raw_response.starts_with(CAPTION_PREFIX));
        assert_eq!(format!("{CAPTION_PREFIX}{}", d.caption), d.raw_response);
        let plain = describe_frame(0, &png(), &client, false).unwrap();
        assert_eq!(plain.caption, d.caption);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let t = Arc::new(FnTransport(|_: &[u8]| text_reply("  ")));
        let client = CaptionClient::new(t, "m", RetryPolicy::none());
        assert!(matches!(describe_frame(1, &png(), &client, false), Err(InterpretError::EmptyCaption(1))));
    }

    #[test]
    fn failed_frames_degrade_to_warnings() {
        let t = Arc::new(FnTransport(|req: &[u8]| {
            let r: CaptionRequest = serde_json::from_slice(req).unwrap();
            if r.image_png_base64.is_empty() {
                Err(InterpretError::Transport("refused".into()))
            } else {
                text_reply("fine")
            }
        }));
        let client = CaptionClient::new(t, "m", RetryPolicy::none());
        let frames = vec![(0, png()), (1, Vec::new()), (2, png())];
        let (ok, failed) = describe_frames(&frames, &client, false, 2);
        assert_eq!(ok.iter().map(|d| d.pair_id).collect::<Vec<_>>(), [0, 2]);
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].0, 1);
    }

    #[test]
    fn ten_listed_tags() {
        let ts = generate_tags(0, "p", &chat_with(vec!["1. A\n2. B\n3. C\n4. D\n5. E\n6. F\n7. G\n8. H\n9. I\n10. J"]), 2);
        assert!(ts.interpreted);
        assert_eq!(ts.tags, ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"]);
        assert_eq!(ts.raw_responses.len(), 1);
    }

    #[test]
    fn twelve_bullets_keep_first_ten() {
        let r = "- t1\n- t2\n- t3\n- t4\n- t5\n- t6\n- t7\n- t8\n- t9\n- t10\n- t11\n- t12";
        let ts = generate_tags(0, "p", &chat_with(vec![r]), 0);
        assert_eq!(ts.tags.len(), 10);
        assert_eq!(ts.tags.last().unwrap(), "t10");
    }

    #[test]
    fn short_reply_triggers_rerequest() {
        let full = "1. A\n2. B\n3. C\n4. D\n5. E\n6. F\n7. G\n8. H\n9. I\n10. J";
        let ts = generate_tags(4, "p", &chat_with(vec!["1. A\n2. A", full]), 1);
        assert!(ts.interpreted);
        assert_eq!(ts.raw_responses.len(), 2);
    }

    #[test]
    fn loose_padding_fills_from_commas() {
        let r = "Tags:\n1. a, b, c, d, e\n2. f, g, h, i, j";
        let ts = generate_tags(0, "p", &chat_with(vec![r]), 1);
        assert!(ts.interpreted);
        assert_eq!(ts.tags.len(), 10);
        assert!(ts.origins.contains(&TagOrigin::Padded));
    }

    #[test]
    fn persistent_failure_is_uninterpreted() {
        let ts = generate_tags(7, "p", &chat_with(vec!["no idea"]), 2);
        assert!(!ts.interpreted);
        assert_eq!(ts.raw_responses, ["no idea"; 3]);
        assert_eq!(ts.cluster_id, 7);

        let down = ChatClient::new(
            Arc::new(FnTransport(|_: &[u8]| Err(InterpretError::Transport("down".into())))),
            "m",
            0.5,
            10,
            RetryPolicy::none(),
        )
        .unwrap();
        let ts = generate_tags(1, "p", &down, 1);
        assert!(!ts.interpreted && ts.tags.is_empty() && ts.raw_responses.is_empty());
    }

    #[test]
    fn descriptions_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rows = vec![FrameDescription {
            pair_id: 2,
            caption: "a man, in a \"mask\"".into(),
            raw_response: String::new(),
            model_id: "m".into(),
            conditional: false,
        }];
        write_descriptions_csv(std::fs::File::create(&path).unwrap(), 5, &rows).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("# seed=5\n"));
        assert_eq!(read_descriptions_csv(&path).unwrap(), [(2, "a man, in a \"mask\"".to_string())]);
    }
}
