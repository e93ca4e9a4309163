//! Frame sampling, transcript parsing and frame/segment alignment.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

pub const DEFAULT_KEEP_NUM: usize = 5;
pub const DEFAULT_WINDOW: usize = 21;
/// Duration assumed for a lone `[MM:SS]` segment.
pub const LONE_SEGMENT_DURATION_S: f64 = 10.0;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("ingest configuration error: {0}")]
    Config(String),
    #[error("{tool} failed on {path}: {message}")]
    Tool { tool: String, path: String, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.display().to_string(), source }
}

/// A sampled video frame with pixel values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp_s: f64,
    pub height: usize,
    pub width: usize,
    /// `height × width × 3`, row-major.
    pub pixels: Vec<f32>,
}

impl Frame {
    /// Builds a frame from an RGB image, resizing with a linear filter.
    pub fn from_image(index: usize, timestamp_s: f64, img: &image::DynamicImage, (h, w): (usize, usize)) -> Self {
        let rgb = img.to_rgb8();
        let rgb = if rgb.dimensions() == (w as u32, h as u32) {
            rgb
        } else {
            image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
        };
        let pixels = rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Self { index, timestamp_s, height: h, width: w, pixels }
    }

    /// Channel-major copy (`3 × H × W`) as the model consumes it.
    pub fn chw(&self) -> Vec<f64> {
        let area = self.height * self.width;
        let mut out = vec![0.0; 3 * area];
        for (p, rgb) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * area + p] = f64::from(rgb[c]);
            }
        }
        out
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        let raw = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("pixel buffer matches size")
    }
}

/// Where frames come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    /// Pre-extracted images, taken in file-name order, one per `rate_s`.
    Directory(PathBuf),
    /// A video decoded by the external media tools.
    Video(PathBuf),
}

/// External programs used to decode video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MediaTools {
    pub ffmpeg: PathBuf,
    pub ffprobe: PathBuf,
    /// Concurrent decoder processes.
    pub jobs: usize,
}

impl Default for MediaTools {
    fn default() -> Self {
        Self { ffmpeg: "ffmpeg".into(), ffprobe: "ffprobe".into(), jobs: 4 }
    }
}

/// Sample timestamps `k · rate_s` strictly before `duration_s`, i.e.
/// `floor(duration / rate)` of them for non-integral ratios.
pub fn sample_times(duration_s: f64, rate_s: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t = k as f64 * rate_s;
        if t >= duration_s {
            return out;
        }
        out.push(t);
        k += 1;
    }
}

/// Samples frames every `rate_s` seconds and resizes them to `target_hw`.
/// Frames that fail to decode are skipped with a warning; indices of the
/// remaining frames stay contiguous and keep their original timestamps.
pub fn sample_frames(
    source: &FrameSource,
    rate_s: f64,
    target_hw: (usize, usize),
    tools: &MediaTools,
) -> Result<Vec<Frame>, IngestError> {
    if !(rate_s > 0.0) || !rate_s.is_finite() {
        return Err(IngestError::Config(format!("frame rate must be a positive number of seconds, got {rate_s}")));
    }
    if target_hw.0 == 0 || target_hw.1 == 0 {
        return Err(IngestError::Config("target frame size must be positive".into()));
    }
    let decoded: Vec<(f64, Option<image::DynamicImage>)> = match source {
        FrameSource::Directory(dir) => {
            let files = list_images(dir)?;
            let times: Vec<(usize, &PathBuf)> = files.iter().enumerate().collect();
            exec::map_slice(&times, |&(k, path)| (k as f64 * rate_s, decode_file(path)))
        }
        FrameSource::Video(path) => {
            let duration = probe_duration(path, tools)?;
            let times = sample_times(duration, rate_s);
            let tmp = tempfile::tempdir().map_err(io_err(path))?;
            let grabbed = exec::map_slice_limited(&times, tools.jobs, |&t| (t, grab_frame(path, t, tmp.path(), tools)));
            grabbed
                .into_iter()
                .map(|(t, r)| match r {
                    Ok(img) => (t, Some(img)),
                    Err(e) => {
                        log::warn!("{e}");
                        (t, None)
                    }
                })
                .collect()
        }
    };
    let kept: Vec<(f64, image::DynamicImage)> = decoded.into_iter().filter_map(|(t, img)| img.map(|i| (t, i))).collect();
    Ok(exec::map_range(kept.len(), |i| Frame::from_image(i, kept[i].0, &kept[i].1, target_hw)))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn decode_file(path: &Path) -> Option<image::DynamicImage> {
    match image::open(path) {
        Ok(img) => Some(img),
        Err(e) => {
            log::warn!("skipping undecodable frame {}: {e}", path.display());
            None
        }
    }
}

fn probe_duration(path: &Path, tools: &MediaTools) -> Result<f64, IngestError> {
    if !path.is_file() {
        return Err(IngestError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "video file not found"),
        });
    }
    let tool_err = |message: String| IngestError::Tool {
        tool: tools.ffprobe.display().to_string(),
        path: path.display().to_string(),
        message,
    };
    let out = Command::new(&tools.ffprobe)
        .args(["-v", "error", "-show_entries", "format=duration", "-of", "default=noprint_wrappers=1:nokey=1"])
        .arg(path)
        .output()
        .map_err(|e| tool_err(e.to_string()))?;
    if !out.status.success() {
        return Err(tool_err(String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|d| d.is_finite() && *d >= 0.0)
        .ok_or_else(|| tool_err(format!("unexpected duration output {:?}", text.trim())))
}

fn grab_frame(path: &Path, t: f64, tmp: &Path, tools: &MediaTools) -> Result<image::DynamicImage, IngestError> {
    let out_path = tmp.join(format!("t{:.3}.png", t));
    let tool_err = |message: String| IngestError::Tool {
        tool: tools.ffmpeg.display().to_string(),
        path: path.display().to_string(),
        message: format!("frame at {t} s: {message}"),
    };
    let out = Command::new(&tools.ffmpeg)
        .args(["-v", "error", "-y", "-ss", &format!("{t:.3}"), "-i"])
        .arg(path)
        .args(["-frames:v", "1"])
        .arg(&out_path)
        .output()
        .map_err(|e| tool_err(e.to_string()))?;
    if !out.status.success() {
        return Err(tool_err(String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    image::open(&out_path).map_err(|e| tool_err(e.to_string()))
}

/// A stretch of transcript text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub start_s: f64,
    pub duration_s: f64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranscriptFormat {
    /// JSON array of `{text, start, duration}` objects.
    TimedJson,
    /// Lines of `[MM:SS] text`.
    TimestampedText,
}

impl TranscriptFormat {
    /// Guesses from the file extension: `.json` is timed JSON, anything
    /// else timestamped text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Self::TimedJson,
            _ => Self::TimestampedText,
        }
    }
}

pub fn parse_transcript(path: &Path, format: TranscriptFormat) -> Result<Vec<Segment>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_transcript_str(&text, format, &path.display().to_string())
}

/// Parses transcript text; `source` only labels error messages.
pub fn parse_transcript_str(text: &str, format: TranscriptFormat, source: &str) -> Result<Vec<Segment>, IngestError> {
    let mut segs = match format {
        TranscriptFormat::TimedJson => parse_timed_json(text, source)?,
        TranscriptFormat::TimestampedText => parse_stamped(text, source)?,
    };
    segs.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for (i, s) in segs.iter_mut().enumerate() {
        s.index = i;
    }
    Ok(segs)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TimedRecord {
    text: String,
    start: f64,
    duration: f64,
}

/// 1-based line on which each top-level array element starts.
fn record_lines(text: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let (mut line, mut depth, mut in_str, mut escaped) = (1, 0usize, false, false);
    let mut expecting = false;
    for c in text.chars() {
        if c == '\n' {
            line += 1;
        }
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        if depth == 1 && expecting && !c.is_whitespace() && c != ',' && c != ']' {
            lines.push(line);
            expecting = false;
        }
        match c {
            '"' => in_str = true,
            '[' | '{' => {
                depth += 1;
                if depth == 1 {
                    expecting = true;
                }
            }
            ']' | '}' => depth = depth.saturating_sub(1),
            ',' if depth == 1 => expecting = true,
            _ => {}
        }
        if depth == 1 && (c == '[' || c == ',') {
            expecting = true;
        }
    }
    lines
}

fn parse_timed_json(text: &str, source: &str) -> Result<Vec<Segment>, IngestError> {
    let malformed = |line: usize, message: String| IngestError::Malformed { path: source.to_string(), line, message };
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| malformed(e.line(), format!("invalid timed-JSON transcript: {e}")))?;
    let lines = record_lines(text);
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        let line = lines.get(i).copied().unwrap_or(1);
        let r: TimedRecord = serde_json::from_value(v).map_err(|e| malformed(line, format!("record {i}: {e}")))?;
        if !r.start.is_finite() || r.start < 0.0 {
            return Err(malformed(line, format!("record {i}: start must be a non-negative number")));
        }
        if !(r.duration > 0.0) || !r.duration.is_finite() {
            return Err(malformed(line, format!("record {i}: duration must be positive")));
        }
        if r.text.trim().is_empty() {
            return Err(malformed(line, format!("record {i}: empty text")));
        }
        out.push(Segment { index: i, start_s: r.start, duration_s: r.duration, text: r.text });
    }
    Ok(out)
}

/// Parses `[MM:SS]` or `[HH:MM:SS]` into seconds.
fn parse_stamp(stamp: &str) -> Option<f64> {
    let parts: Vec<&str> = stamp.split(':').collect();
    if parts.len() < 2 || parts.len() > 3 || parts.iter().any(|p| p.is_empty()) {
        return None;
    }
    let mut secs = 0.0;
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let v: f64 = if last { p.parse().ok()? } else { p.parse::<u32>().ok()?.into() };
        if v < 0.0 || (i > 0 && v >= 60.0) {
            return None;
        }
        secs = secs * 60.0 + v;
    }
    Some(secs)
}

fn parse_stamped(text: &str, source: &str) -> Result<Vec<Segment>, IngestError> {
    let malformed = |line: usize, message: String| IngestError::Malformed { path: source.to_string(), line, message };
    let mut raw: Vec<(f64, String)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let no = no + 1;
        let line = line.trim_start_matches('\u{feff}').trim();
        if line.is_empty() {
            continue;
        }
        let rest = line.strip_prefix('[').ok_or_else(|| malformed(no, "expected a [MM:SS] timestamp".into()))?;
        let (stamp, body) = rest.split_once(']').ok_or_else(|| malformed(no, "unterminated timestamp".into()))?;
        let start = parse_stamp(stamp.trim()).ok_or_else(|| malformed(no, format!("bad timestamp [{stamp}]")))?;
        let body = body.trim();
        if body.is_empty() {
            return Err(malformed(no, "empty segment text".into()));
        }
        if raw.last().is_some_and(|(s, _)| *s > start) {
            return Err(malformed(no, "timestamps must not decrease".into()));
        }
        raw.push((start, body.to_string()));
    }
    let mut out = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let duration = if i + 1 < raw.len() {
            raw[i + 1].0 - raw[i].0
        } else if i > 0 {
            raw[i].0 - raw[i - 1].0
        } else {
            LONE_SEGMENT_DURATION_S
        };
        // Equal consecutive stamps would give a zero-length segment.
        let duration = if duration > 0.0 { duration } else { LONE_SEGMENT_DURATION_S };
        out.push(Segment { index: i, start_s: raw[i].0, duration_s: duration, text: raw[i].1.clone() });
    }
    Ok(out)
}

/// One aligned `(frame, segment)` reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    pub frame_index: usize,
    pub segment_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPairList {
    pub pairs: Vec<PairRef>,
    pub source_lang: String,
    pub manifest_path: Option<PathBuf>,
}

/// Index of the frame nearest to `t`; ties go to the earlier frame.
pub fn nearest_frame(frame_times: &[f64], t: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &ft) in frame_times.iter().enumerate() {
        let d = (ft - t).abs();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Pairs every segment with the frame closest to its start.
pub fn align_by_timestamp(frame_times: &[f64], segments: &[Segment], source_lang: &str) -> AlignedPairList {
    let pairs = if frame_times.is_empty() {
        Vec::new()
    } else {
        segments
            .iter()
            .map(|s| PairRef {
                frame_index: nearest_frame(frame_times, s.start_s).expect("non-empty"),
                segment_index: s.index,
            })
            .collect()
    };
    AlignedPairList { pairs, source_lang: source_lang.to_string(), manifest_path: None }
}

/// Frame indices kept by uniform downsampling: in every block of `window`
/// frames the ones at `floor((i + 0.5) · window / keep)`, `i < keep`. A
/// trailing partial block keeps the offsets that fall inside it.
pub fn uniform_indices(frame_count: usize, keep: usize, window: usize) -> Result<Vec<usize>, IngestError> {
    if keep == 0 || window == 0 || keep > window {
        return Err(IngestError::Config(format!("uniform downsampling needs 0 < keep ({keep}) ≤ window ({window})")));
    }
    let offsets: Vec<usize> = (0..keep).map(|i| ((2 * i + 1) * window) / (2 * keep)).collect();
    let mut out = Vec::new();
    let mut base = 0;
    while base < frame_count {
        let len = window.min(frame_count - base);
        out.extend(offsets.iter().filter(|&&o| o < len).map(|&o| base + o));
        base += window;
    }
    Ok(out)
}

/// Downsamples frames uniformly and pairs the kept frames with segments by
/// rank, truncating to the shorter list.
pub fn align_uniform(
    frame_count: usize,
    segments: &[Segment],
    keep: usize,
    window: usize,
    source_lang: &str,
) -> Result<AlignedPairList, IngestError> {
    let kept = uniform_indices(frame_count, keep, window)?;
    let pairs = kept.iter().zip(segments).map(|(&f, s)| PairRef { frame_index: f, segment_index: s.index }).collect();
    Ok(AlignedPairList { pairs, source_lang: source_lang.to_string(), manifest_path: None })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub pair_id: usize,
    pub frame_index: usize,
    pub frame_path: String,
    pub frame_timestamp_s: f64,
    pub segment_index: usize,
    pub segment_start_s: f64,
    pub caption: String,
}

pub fn write_manifest<W: Write>(out: W, rows: &[ManifestRow]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| IngestError::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|e| IngestError::Manifest(e.to_string()))
}

/// Reads a manifest; lines starting with `#` are comments.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, IngestError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| {
        IngestError::Manifest(format!("{}: {e}", path.display()))
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| IngestError::Manifest(format!("{}: {e}", path.display()))))
        .collect()
}
