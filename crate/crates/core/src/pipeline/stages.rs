use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Alignment, RunConfig, SegmenterKind};
use super::rundir::{create_file, RunDirectory};
use super::{PipelineError, Stage};
use crate::cluster::{self, Clustering, KSweepReport};
use crate::compare::{self, ClusterSide, PairSimilarityMatrix};
use crate::ingest::{self, ManifestRow, TranscriptFormat};
use crate::interpret::{self, BackendKind, FrameDescription, TagSet};
use crate::model::{self, AlignedPair, Checkpoint, LatentMatrix, ModelError};
use crate::plot::{self, Series};
use crate::textprep::{self, EmbeddingTable, WordSegmenter};
use crate::verbalize::{self, Metric, WordIndex};

fn stage_err(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

macro_rules! at {
    ($stage:expr) => {
        |e| stage_err($stage)(&e)
    };
}

fn seed_line(out: &mut impl Write, seed: u64) -> std::io::Result<()> {
    writeln!(out, "# seed={seed}")
}

/// Runs `f` under the run lock and logs its duration.
fn locked<T>(cfg: &RunConfig, stage: Stage, f: impl FnOnce(&RunConfig, &RunDirectory) -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    cfg.validate()?;
    let run = RunDirectory::new(cfg.run_dir());
    let _lock = run.lock()?;
    timed(cfg, &run, stage, f)
}

fn timed<T>(
    cfg: &RunConfig,
    run: &RunDirectory,
    stage: Stage,
    f: impl FnOnce(&RunConfig, &RunDirectory) -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    log::info!("{}: {} stage", run.root().display(), stage.name());
    let t0 = Instant::now();
    let out = f(cfg, run)?;
    run.log_timing(stage, t0.elapsed())?;
    Ok(out)
}

// ---------------------------------------------------------------- ingest

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Vec<ManifestRow>, PipelineError> {
    locked(cfg, Stage::Ingest, ingest_stage)
}

fn ingest_stage(cfg: &RunConfig, run: &RunDirectory) -> Result<Vec<ManifestRow>, PipelineError> {
    let s = Stage::Ingest;
    let frames = ingest::sample_frames(&cfg.data.frames, cfg.data.rate_s, cfg.model.image_hw, &cfg.media).map_err(at!(s))?;
    if frames.is_empty() {
        return Err(stage_err(s)(&"no frames were sampled"));
    }
    let format = cfg.data.transcript_format.unwrap_or_else(|| TranscriptFormat::from_path(&cfg.data.transcript));
    let segments = ingest::parse_transcript(&cfg.data.transcript, format).map_err(at!(s))?;
    let aligned = match cfg.data.alignment {
        Alignment::Timestamp => {
            let times: Vec<f64> = frames.iter().map(|f| f.timestamp_s).collect();
            ingest::align_by_timestamp(&times, &segments, &cfg.language)
        }
        Alignment::Uniform { keep, window } => {
            ingest::align_uniform(frames.len(), &segments, keep, window, &cfg.language).map_err(at!(s))?
        }
    };
    if aligned.pairs.is_empty() {
        return Err(stage_err(s)(&"alignment produced no pairs"));
    }
    log::info!("{} frames, {} segments, {} aligned pairs", frames.len(), segments.len(), aligned.pairs.len());

    std::fs::create_dir_all(run.root())?;
    if run.frames_dir().exists() {
        std::fs::remove_dir_all(run.frames_dir())?;
    }
    std::fs::create_dir_all(run.frames_dir())?;
    let mut rows = Vec::with_capacity(aligned.pairs.len());
    for (pair_id, p) in aligned.pairs.iter().enumerate() {
        let frame = &frames[p.frame_index];
        let seg = &segments[p.segment_index];
        let path = run.frame(frame.index);
        if !path.exists() {
            frame.to_rgb_image().save(&path).map_err(at!(s))?;
        }
        let rel = path.strip_prefix(run.root()).unwrap_or(&path).to_string_lossy().into_owned();
        rows.push(ManifestRow {
            pair_id,
            frame_index: frame.index,
            frame_path: rel,
            frame_timestamp_s: frame.timestamp_s,
            segment_index: seg.index,
            segment_start_s: seg.start_s,
            caption: seg.text.clone(),
        });
    }
    let mut out = create_file(&run.manifest())?;
    seed_line(&mut out, cfg.seed)?;
    ingest::write_manifest(&mut out, &rows).map_err(at!(s))?;
    let copy = toml::to_string(cfg).map_err(at!(s))?;
    std::fs::write(run.config_copy(), format!("# seed={}\n{copy}", cfg.seed))?;
    Ok(rows)
}

// ------------------------------------------------------------- pair data

fn load_tables(cfg: &RunConfig, stage: Stage) -> Result<Vec<EmbeddingTable>, PipelineError> {
    cfg.data
        .embeddings
        .iter()
        .map(|p| textprep::load_embedding_table(p, cfg.model.embed_dim, &cfg.language).map_err(at!(stage)))
        .collect()
}

struct Tokenizer {
    kind: SegmenterKind,
    seg: Option<Box<dyn WordSegmenter>>,
}

impl Tokenizer {
    fn new(kind: SegmenterKind) -> Self {
        let seg: Option<Box<dyn WordSegmenter>> = match kind {
            SegmenterKind::English => None,
            SegmenterKind::Whitespace => Some(Box::new(textprep::WhitespaceSegmenter)),
            SegmenterKind::Char => Some(Box::new(textprep::CharSegmenter)),
            #[cfg(feature = "jieba")]
            SegmenterKind::Jieba => Some(Box::new(textprep::JiebaSegmenter::new())),
            #[cfg(not(feature = "jieba"))]
            SegmenterKind::Jieba => None,
        };
        Self { kind, seg }
    }

    fn tokens(&self, text: &str) -> Result<Vec<String>, textprep::TextError> {
        match self.kind {
            SegmenterKind::English => Ok(textprep::tokenize_en(text)),
            _ => textprep::segment_zh(text, self.seg.as_deref()),
        }
    }
}

fn read_manifest(run: &RunDirectory) -> Result<Vec<ManifestRow>, PipelineError> {
    run.require(&run.manifest(), Stage::Ingest)?;
    ingest::read_manifest(&run.manifest()).map_err(at!(Stage::Ingest))
}

/// Rebuilds the training pairs from the manifest, stored frames and the
/// embedding tables.
fn load_pairs(
    cfg: &RunConfig,
    run: &RunDirectory,
    stage: Stage,
    tables: &[EmbeddingTable],
) -> Result<(Vec<ManifestRow>, Vec<AlignedPair>), PipelineError> {
    let rows = read_manifest(run)?;
    let tok = Tokenizer::new(cfg.segmenter());
    let refs: Vec<&EmbeddingTable> = tables.iter().collect();
    let mut pairs = Vec::with_capacity(rows.len());
    for r in &rows {
        let img = image::open(run.root().join(&r.frame_path))
            .map_err(|e| stage_err(stage)(&format!("{}: {e}", r.frame_path)))?;
        let frame = ingest::Frame::from_image(r.frame_index, r.frame_timestamp_s, &img, cfg.model.image_hw);
        let tokens = tok.tokens(&r.caption).map_err(at!(stage))?;
        let caption = textprep::embed_tokens_chain(&tokens, &refs, cfg.data.max_len).map_err(at!(stage))?;
        pairs.push(AlignedPair {
            pair_id: r.pair_id,
            frame_timestamp_s: r.frame_timestamp_s,
            segment_index: r.segment_index,
            image: frame.chw(),
            caption,
        });
    }
    Ok((rows, pairs))
}

// ----------------------------------------------------------------- train

pub fn cmd_train(cfg: &RunConfig) -> Result<Checkpoint, PipelineError> {
    locked(cfg, Stage::Train, train_stage)
}

fn train_stage(cfg: &RunConfig, run: &RunDirectory) -> Result<Checkpoint, PipelineError> {
    let s = Stage::Train;
    let tables = load_tables(cfg, s)?;
    let (_, pairs) = load_pairs(cfg, run, s, &tables)?;
    let mcfg = cfg.model_config();
    let every = (mcfg.epochs / 10).max(1);
    let result = model::train_with_observer(&pairs, &mcfg, &mut |epoch, l| {
        if epoch % every == 0 || epoch == 1 {
            log::info!("epoch {epoch}: image {:.6} text {:.6} total {:.6}", l.image_loss, l.text_loss, l.total);
        }
    });
    let ck = match result {
        Ok(ck) => ck,
        Err(ModelError::NonFinite { epoch, last_good }) => {
            let path = run.checkpoint_dir().join("last_good.ckpt");
            std::fs::create_dir_all(run.checkpoint_dir())?;
            last_good.save(&path).map_err(at!(s))?;
            return Err(stage_err(s)(&format!(
                "loss became non-finite in epoch {epoch}; the model from epoch {} is in {}",
                last_good.epoch,
                path.display()
            )));
        }
        Err(e) => return Err(stage_err(s)(&e)),
    };
    std::fs::create_dir_all(run.checkpoint_dir())?;
    ck.save(&run.checkpoint()).map_err(at!(s))?;
    let mut out = create_file(&run.checkpoint_dir().join("loss_curve.csv"))?;
    seed_line(&mut out, cfg.seed)?;
    model::write_loss_curve(&mut out, &ck.loss_curve)?;
    let pts = |f: fn(&model::LossBreakdown) -> f64| -> Vec<(f64, f64)> {
        ck.loss_curve.iter().enumerate().map(|(i, l)| ((i + 1) as f64, f(l))).collect()
    };
    plot::line_chart(
        &run.checkpoint_dir().join("loss_curve.svg"),
        "Training loss",
        "epoch",
        "loss",
        &[
            Series { name: "image", points: pts(|l| l.image_loss) },
            Series { name: "text", points: pts(|l| l.text_loss) },
            Series { name: "total", points: pts(|l| l.total) },
        ],
    )
    .map_err(at!(s))?;
    Ok(ck)
}

// ---------------------------------------------------------------- encode

pub fn cmd_encode(cfg: &RunConfig) -> Result<LatentMatrix, PipelineError> {
    locked(cfg, Stage::Encode, encode_stage)
}

fn encode_stage(cfg: &RunConfig, run: &RunDirectory) -> Result<LatentMatrix, PipelineError> {
    let s = Stage::Encode;
    run.require(&run.checkpoint(), Stage::Train)?;
    let ck = Checkpoint::load(&run.checkpoint()).map_err(at!(s))?;
    let tables = load_tables(cfg, s)?;
    let (_, pairs) = load_pairs(cfg, run, s, &tables)?;
    let latents = model::extract_latents(&pairs, &ck).map_err(at!(s))?;
    write_latents(&run.latents(), cfg.seed, &latents)?;

    let recon = model::reconstruct(&pairs, &ck, true).map_err(at!(s))?;
    let index = WordIndex::new(&tables[0], Metric::Euclidean);
    let words: Vec<_> = recon.iter().map(|r| verbalize::verbalize_sequence(&r.text, &r.mask, &index, r.pair_id)).collect();
    let mut out = create_file(&run.latents_dir().join("verbalized.tsv"))?;
    seed_line(&mut out, cfg.seed)?;
    verbalize::write_verbalized(&mut out, &words)?;
    Ok(latents)
}

/// `pair_id,z0,…` with shortest round-trip float formatting.
pub fn write_latents(path: &Path, seed: u64, x: &LatentMatrix) -> Result<(), PipelineError> {
    let mut out = create_file(path)?;
    seed_line(&mut out, seed)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["pair_id".to_string()];
    header.extend((0..x.dim).map(|i| format!("z{i}")));
    w.write_record(&header).map_err(at!(Stage::Encode))?;
    for (id, row) in x.pair_ids.iter().zip(x.iter_rows()) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(at!(Stage::Encode))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<LatentMatrix, PipelineError> {
    let bad = |m: String| PipelineError::Stage { stage: Stage::Encode, message: format!("{}: {m}", path.display()) };
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| bad(e.to_string()))?;
    let dim = r.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(1);
    let mut x = LatentMatrix::empty(dim);
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut cells = rec.iter();
        let id = cells.next().unwrap_or_default().parse::<usize>().map_err(|e| bad(e.to_string()))?;
        for c in cells {
            x.values.push(c.parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        x.pair_ids.push(id);
        x.rows += 1;
    }
    if x.values.len() != x.rows * dim {
        return Err(bad("ragged latent rows".into()));
    }
    Ok(x)
}

fn load_latents(run: &RunDirectory) -> Result<LatentMatrix, PipelineError> {
    run.require(&run.latents(), Stage::Encode)?;
    read_latents(&run.latents())
}

// ----------------------------------------------------------------- sweep

pub fn cmd_sweep(cfg: &RunConfig) -> Result<KSweepReport, PipelineError> {
    locked(cfg, Stage::Sweep, sweep_stage)
}

fn sweep_stage(cfg: &RunConfig, run: &RunDirectory) -> Result<KSweepReport, PipelineError> {
    let s = Stage::Sweep;
    let x = load_latents(run)?;
    let c = &cfg.cluster;
    let k_max = c.k_max.min(x.rows);
    if k_max < c.k_max {
        log::warn!("only {} points: sweeping K up to {k_max} instead of {}", x.rows, c.k_max);
    }
    if c.k_min > k_max {
        return Err(PipelineError::Config(format!("k_min {} exceeds the {} available points", c.k_min, x.rows)));
    }
    let report = cluster::sweep_k(&x, c.k_min, k_max, cfg.seed, c.restarts).map_err(at!(s))?;
    let mut out = create_file(&run.sweep_report())?;
    seed_line(&mut out, cfg.seed)?;
    cluster::write_sweep_csv(&mut out, &report)?;
    let metric = |f: fn(&cluster::SweepRow) -> Option<f64>| -> Vec<(f64, f64)> {
        report.rows.iter().filter_map(|r| f(r).map(|v| (r.k as f64, v))).collect()
    };
    plot::line_chart(
        &run.sweep_dir().join("k_sweep.svg"),
        "K sweep",
        "K",
        "value",
        &[
            Series { name: "avg intra-cluster distance", points: metric(|r| Some(r.avg_intra)) },
            Series { name: "avg cross-cluster distance", points: metric(|r| r.avg_cross) },
            Series { name: "robustness (K vs K+1)", points: metric(|r| r.robustness) },
        ],
    )
    .map_err(at!(s))?;

    let points = cluster::project_2d(&x, c.perplexity, cfg.seed).map_err(at!(s))?;
    let mut out = create_file(&run.projection())?;
    seed_line(&mut out, cfg.seed)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair_id", "x", "y"]).map_err(at!(s))?;
    for (id, p) in x.pair_ids.iter().zip(&points) {
        w.write_record([id.to_string(), p[0].to_string(), p[1].to_string()]).map_err(at!(s))?;
    }
    w.flush()?;
    Ok(report)
}

fn read_projection(path: &Path) -> Result<Vec<(usize, [f64; 2])>, PipelineError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(at!(Stage::Sweep))?;
    r.deserialize::<(usize, f64, f64)>()
        .map(|row| row.map(|(id, x, y)| (id, [x, y])).map_err(at!(Stage::Sweep)))
        .collect()
}

// --------------------------------------------------------------- cluster

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Selection {
    k: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClusterSummary {
    seed: u64,
    k: usize,
    inertia: f64,
    sizes: Vec<usize>,
    avg_intra: f64,
    avg_cross: Option<f64>,
}

/// Fits the chosen K. A K outside the configured sweep range is allowed
/// with a warning; K larger than the number of pairs is an error.
pub fn cmd_cluster(cfg: &RunConfig) -> Result<Clustering, PipelineError> {
    locked(cfg, Stage::Cluster, cluster_stage)
}

fn chosen_k(cfg: &RunConfig) -> Result<usize, PipelineError> {
    cfg.cluster.k.ok_or_else(|| PipelineError::Config("no K chosen: pass --k or set cluster.k".into()))
}

fn cluster_stage(cfg: &RunConfig, run: &RunDirectory) -> Result<Clustering, PipelineError> {
    let s = Stage::Cluster;
    let k = chosen_k(cfg)?;
    let x = load_latents(run)?;
    if !(cfg.cluster.k_min..=cfg.cluster.k_max).contains(&k) {
        log::warn!("K = {k} is outside the swept range [{}, {}]; proceeding", cfg.cluster.k_min, cfg.cluster.k_max);
    }
    if k > x.rows {
        return Err(PipelineError::Config(format!("K = {k} exceeds the number of pairs ({})", x.rows)));
    }
    let c = cluster::kmeans(&x, k, cfg.seed, cfg.cluster.restarts).map_err(at!(s))?;
    let dir = run.clustering_dir(k);
    std::fs::create_dir_all(&dir)?;

    let mut out = create_file(&run.assignments(k))?;
    seed_line(&mut out, cfg.seed)?;
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["pair_id", "cluster"]).map_err(at!(s))?;
    for (id, a) in x.pair_ids.iter().zip(&c.assignments) {
        w.write_record([id.to_string(), a.to_string()]).map_err(at!(s))?;
    }
    w.flush()?;
    drop(w);

    let mut out = create_file(&dir.join("centroids.csv"))?;
    seed_line(&mut out, cfg.seed)?;
    let mut w = csv::Writer::from_writer(&mut out);
    let mut header = vec!["cluster".to_string()];
    header.extend((0..c.dim).map(|i| format!("z{i}")));
    w.write_record(&header).map_err(at!(s))?;
    for j in 0..k {
        let mut rec = vec![j.to_string()];
        rec.extend(c.centroid(j).iter().map(f64::to_string));
        w.write_record(&rec).map_err(at!(s))?;
    }
    w.flush()?;
    drop(w);

    let summary = ClusterSummary {
        seed: cfg.seed,
        k,
        inertia: c.inertia,
        sizes: c.sizes(),
        avg_intra: cluster::avg_intra_distance(&c, &x),
        avg_cross: cluster::avg_cross_distance(&c),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary).map_err(at!(s))?)?;

    if run.projection().exists() {
        let proj = read_projection(&run.projection())?;
        let by_id: BTreeMap<usize, usize> = x.pair_ids.iter().copied().zip(c.assignments.iter().copied()).collect();
        let points: Vec<[f64; 2]> = proj.iter().map(|p| p.1).collect();
        let labels: Vec<usize> = proj.iter().map(|p| by_id.get(&p.0).copied().unwrap_or(0)).collect();
        let ids: Vec<usize> = proj.iter().map(|p| p.0).collect();
        let mut out = create_file(&dir.join("tsne.csv"))?;
        seed_line(&mut out, cfg.seed)?;
        cluster::write_scatter_csv(&mut out, &points, &labels, &ids)?;
        plot::scatter(&dir.join("tsne.svg"), &format!("t-SNE of latent means, K = {k}"), &points, &labels)
            .map_err(at!(s))?;
    }
    let sel = Selection { k, seed: cfg.seed };
    std::fs::write(run.selected_k(), serde_json::to_vec_pretty(&sel).map_err(at!(s))?)?;
    Ok(c)
}

fn read_assignments(path: &Path) -> Result<Vec<(usize, usize)>, PipelineError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(at!(Stage::Cluster))?;
    r.deserialize::<(usize, usize)>().map(|row| row.map_err(at!(Stage::Cluster))).collect()
}

// ------------------------------------------------------------- interpret

/// Outcome of the interpret stage.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretSummary {
    pub k: usize,
    pub descriptions: Vec<FrameDescription>,
    pub failed_frames: Vec<usize>,
    pub tagsets: Vec<TagSet>,
}

pub fn cmd_interpret(cfg: &RunConfig) -> Result<InterpretSummary, PipelineError> {
    locked(cfg, Stage::Interpret, interpret_stage)
}

fn interpret_stage(cfg: &RunConfig, run: &RunDirectory) -> Result<InterpretSummary, PipelineError> {
    let s = Stage::Interpret;
    let k = match cfg.cluster.k {
        Some(k) => k,
        None => {
            run.require(&run.selected_k(), Stage::Cluster)?;
            let sel: Selection =
                serde_json::from_slice(&std::fs::read(run.selected_k())?).map_err(at!(Stage::Cluster))?;
            sel.k
        }
    };
    run.require(&run.assignments(k), Stage::Cluster)?;
    let assignments = read_assignments(&run.assignments(k))?;
    let rows = read_manifest(run)?;
    let by_id: BTreeMap<usize, &ManifestRow> = rows.iter().map(|r| (r.pair_id, r)).collect();

    if run.interpret_dir().exists() {
        std::fs::remove_dir_all(run.interpret_dir())?;
    }
    std::fs::create_dir_all(run.tags_dir())?;
    std::fs::create_dir_all(run.interpret_dir().join("prompts"))?;
    std::fs::create_dir_all(run.interpret_dir().join("raw"))?;

    let mut ids: Vec<usize> = assignments.iter().map(|a| a.0).collect();
    ids.sort_unstable();
    let mut frames = Vec::with_capacity(ids.len());
    for id in &ids {
        let row = by_id.get(id).ok_or_else(|| stage_err(s)(&format!("pair {id} is not in the manifest")))?;
        frames.push((*id, std::fs::read(run.root().join(&row.frame_path))?));
    }
    let captioner = cfg.interpret.captioner.caption_client().map_err(at!(s))?;
    let (mut descriptions, failed) =
        interpret::describe_frames(&frames, &captioner, cfg.interpret.conditional, cfg.interpret.captioner.max_in_flight);
    descriptions.sort_by_key(|d| d.pair_id);
    let mut out = create_file(&run.descriptions())?;
    interpret::write_descriptions_csv(&mut out, cfg.seed, &descriptions).map_err(at!(s))?;
    if !failed.is_empty() {
        let mut out = create_file(&run.interpret_dir().join("failed_descriptions.csv"))?;
        seed_line(&mut out, cfg.seed)?;
        writeln!(out, "pair_id,error")?;
        for (id, e) in &failed {
            writeln!(out, "{id},{:?}", e)?;
        }
    }
    let desc_by_id: BTreeMap<usize, &str> = descriptions.iter().map(|d| (d.pair_id, d.caption.as_str())).collect();

    let chat = cfg.interpret.chat.chat_client().map_err(at!(s))?;
    let mut tagsets = Vec::with_capacity(k);
    for c in 0..k {
        let mut members: Vec<usize> = assignments.iter().filter(|a| a.1 == c).map(|a| a.0).collect();
        members.sort_unstable();
        let captions: Vec<&str> = members.iter().filter_map(|id| by_id.get(id)).map(|r| r.caption.as_str()).collect();
        let descs: Vec<&str> = members.iter().filter_map(|id| desc_by_id.get(id).copied()).collect();
        let ts = match interpret::build_cluster_prompt(&captions, &descs) {
            Ok(prompt) => {
                std::fs::write(run.interpret_dir().join("prompts").join(format!("cluster_{c}.txt")), &prompt)?;
                interpret::generate_tags(c, &prompt, &chat, cfg.interpret.tag_rerequests)
            }
            Err(e) => {
                log::warn!("cluster {c}: {e}");
                TagSet { cluster_id: c, tags: Vec::new(), origins: Vec::new(), raw_responses: Vec::new(), interpreted: false }
            }
        };
        for (i, r) in ts.raw_responses.iter().enumerate() {
            std::fs::write(run.interpret_dir().join("raw").join(format!("cluster_{c}_reply_{}.txt", i + 1)), r)?;
        }
        std::fs::write(run.tagset(c), serde_json::to_vec_pretty(&ts).map_err(at!(s))?)?;
        tagsets.push(ts);
    }

    let names = cfg.names()?;
    let mut out = create_file(&run.interpret_dir().join("tags.csv"))?;
    seed_line(&mut out, cfg.seed)?;
    let mut w = csv::Writer::from_writer(&mut out);
    let mut header = vec!["cluster".to_string(), "name".into(), "interpreted".into()];
    header.extend((1..=interpret::TAGS_PER_CLUSTER).map(|i| format!("tag_{i}")));
    w.write_record(&header).map_err(at!(s))?;
    for ts in &tagsets {
        let mut rec = vec![
            ts.cluster_id.to_string(),
            names.get(&ts.cluster_id).cloned().unwrap_or_default(),
            ts.interpreted.to_string(),
        ];
        rec.extend((0..interpret::TAGS_PER_CLUSTER).map(|i| ts.tags.get(i).cloned().unwrap_or_default()));
        w.write_record(&rec).map_err(at!(s))?;
    }
    w.flush()?;
    drop(w);

    Ok(InterpretSummary { k, descriptions, failed_frames: failed.into_iter().map(|f| f.0).collect(), tagsets })
}

/// Tag sets of a run in cluster order.
pub fn read_tagsets(run: &RunDirectory) -> Result<Vec<TagSet>, PipelineError> {
    run.require(&run.tags_dir(), Stage::Interpret)?;
    let mut sets = Vec::new();
    for entry in std::fs::read_dir(run.tags_dir())? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let ts: TagSet = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| stage_err(Stage::Interpret)(&format!("{}: {e}", path.display())))?;
            sets.push(ts);
        }
    }
    sets.sort_by_key(|t| t.cluster_id);
    Ok(sets)
}

// --------------------------------------------------------------- compare

/// Compares the interpreted clusters of two runs. Artifacts go to the first
/// run's `compare/` directory; embeddings use the first run's embedder.
pub fn cmd_compare(a: &RunConfig, b: &RunConfig) -> Result<PairSimilarityMatrix, PipelineError> {
    b.validate()?;
    locked(a, Stage::Compare, |a, run| compare_stage(a, run, b))
}

fn compare_stage(a: &RunConfig, run_a: &RunDirectory, b: &RunConfig) -> Result<PairSimilarityMatrix, PipelineError> {
    let s = Stage::Compare;
    let run_b = RunDirectory::new(b.run_dir());
    let tags_a = read_tagsets(run_a)?;
    let tags_b = read_tagsets(&run_b)?;
    let client = a.compare.embedder.embed_client().map_err(at!(s))?;
    let (names_a, names_b) = (a.names()?, b.names()?);
    let (label_a, label_b) = (a.label(), b.label());
    let m = compare::similarity_matrix(
        &ClusterSide { label: &label_a, tagsets: &tags_a, names: &names_a },
        &ClusterSide { label: &label_b, tagsets: &tags_b, names: &names_b },
        &client,
    )
    .map_err(at!(s))?;
    compare::export_heatmap(&m, a.seed, &run_a.compare_dir(), "heatmap", &format!("{label_a} vs {label_b}"))
        .map_err(at!(s))?;
    Ok(m)
}

// ------------------------------------------------------------------- all

/// Loads the configuration named by `compare.other_config`, applying the
/// `other_run_dir` override and, if given, a backend override.
pub fn load_other(cfg: &RunConfig, backend: Option<BackendKind>) -> Result<Option<RunConfig>, PipelineError> {
    let Some(path) = &cfg.compare.other_config else { return Ok(None) };
    let mut other = RunConfig::load(path)?;
    if let Some(dir) = &cfg.compare.other_run_dir {
        other.run_dir = Some(dir.clone());
    }
    other.apply(&super::Overrides { backend, ..Default::default() });
    Ok(Some(other))
}

fn run_through_interpret(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    chosen_k(cfg)?;
    let run = RunDirectory::new(cfg.run_dir());
    let _lock = run.lock()?;
    timed(cfg, &run, Stage::Ingest, ingest_stage)?;
    timed(cfg, &run, Stage::Train, train_stage)?;
    timed(cfg, &run, Stage::Encode, encode_stage)?;
    timed(cfg, &run, Stage::Sweep, sweep_stage)?;
    timed(cfg, &run, Stage::Cluster, cluster_stage)?;
    timed(cfg, &run, Stage::Interpret, interpret_stage)?;
    Ok(())
}

/// Runs every stage in order. When a comparison run is configured and has
/// no tags yet, its stages run first (into its own run directory), then the
/// two runs are compared.
pub fn cmd_all(cfg: &RunConfig, backend: Option<BackendKind>) -> Result<Option<PairSimilarityMatrix>, PipelineError> {
    let other = load_other(cfg, backend)?;
    if let Some(o) = &other {
        o.validate()?;
        chosen_k(o)?;
    }
    run_through_interpret(cfg)?;
    let Some(other) = other else { return Ok(None) };
    let run_b = RunDirectory::new(other.run_dir());
    if !run_b.tags_dir().exists() {
        log::info!("comparison run {} has no tags yet; running it first", run_b.root().display());
        run_through_interpret(&other)?;
    }
    cmd_compare(cfg, &other).map(Some)
}
