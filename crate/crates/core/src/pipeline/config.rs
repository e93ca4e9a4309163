use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cluster::{DEFAULT_K_MAX, DEFAULT_K_MIN, DEFAULT_PERPLEXITY, DEFAULT_RESTARTS};
use crate::ingest::{FrameSource, MediaTools, TranscriptFormat};
use crate::interpret::{BackendConfig, BackendKind};
use crate::model::ModelConfig;
use crate::textprep::DEFAULT_MAX_LEN;

/// How frames are matched to transcript segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Each segment takes the frame nearest to its start time.
    #[default]
    Timestamp,
    /// Keep `keep` evenly spread frames out of every `window` and pair them
    /// with segments by rank.
    Uniform { keep: usize, window: usize },
}

/// Tokenizer used for captions of a given language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    /// Lowercase and split on anything that is not a letter or digit.
    English,
    Whitespace,
    Char,
    Jieba,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub frames: FrameSource,
    /// Seconds between sampled frames.
    pub rate_s: f64,
    pub transcript: PathBuf,
    /// Guessed from the file extension when absent.
    pub transcript_format: Option<TranscriptFormat>,
    /// Embedding tables consulted in order for each token.
    pub embeddings: Vec<PathBuf>,
    pub max_len: usize,
    pub alignment: Alignment,
    /// Defaults to `english` for `en` and `jieba` (or `char` without the
    /// jieba feature) otherwise.
    pub segmenter: Option<SegmenterKind>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: FrameSource::Directory(PathBuf::from("frames")),
            rate_s: 2.0,
            transcript: PathBuf::from("transcript.json"),
            transcript_format: None,
            embeddings: Vec::new(),
            max_len: DEFAULT_MAX_LEN,
            alignment: Alignment::Timestamp,
            segmenter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// The chosen K; `--k` overrides it.
    pub k: Option<usize>,
    pub restarts: usize,
    pub perplexity: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k_min: DEFAULT_K_MIN, k_max: DEFAULT_K_MAX, k: None, restarts: DEFAULT_RESTARTS, perplexity: DEFAULT_PERPLEXITY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    /// Prompt the captioner with the news-photo prefix.
    pub conditional: bool,
    /// Extra chat requests when a reply has fewer than ten tags.
    pub tag_rerequests: usize,
    pub captioner: BackendConfig,
    pub chat: BackendConfig,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self { conditional: false, tag_rerequests: 2, captioner: BackendConfig::default(), chat: BackendConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub embedder: BackendConfig,
    /// Run configuration of the other video; enables the compare stage of
    /// `all`.
    pub other_config: Option<PathBuf>,
    /// Overrides the other configuration's run directory.
    pub other_run_dir: Option<PathBuf>,
}

/// Everything one run needs. Relative paths are resolved against the
/// directory of the file the configuration was loaded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Language tag of the captions, e.g. `en` or `zh`.
    pub language: String,
    /// Short name used for this run in comparisons.
    pub label: Option<String>,
    /// Defaults to `runs/<label>` under the working directory.
    pub run_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub media: MediaTools,
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub interpret: InterpretConfig,
    pub compare: CompareConfig,
    /// Display names by cluster id (as a string key).
    pub cluster_names: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            language: "en".into(),
            label: None,
            run_dir: None,
            data: DataConfig::default(),
            media: MediaTools::default(),
            model: ModelConfig::default(),
            cluster: ClusterConfig::default(),
            interpret: InterpretConfig::default(),
            compare: CompareConfig::default(),
            cluster_names: BTreeMap::new(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub backend: Option<BackendKind>,
}

/// Environment variables that replace backend endpoints, so credentials
/// and hosts stay out of checked-in files. Bearer tokens are read from the
/// variable each backend names in `api_key_env`.
pub const ENV_CAPTION_ENDPOINT: &str = "CRVAE_CAPTION_ENDPOINT";
pub const ENV_CHAT_ENDPOINT: &str = "CRVAE_CHAT_ENDPOINT";
pub const ENV_EMBED_ENDPOINT: &str = "CRVAE_EMBED_ENDPOINT";

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        match &mut self.data.frames {
            FrameSource::Directory(p) | FrameSource::Video(p) => resolve(base, p),
        }
        resolve(base, &mut self.data.transcript);
        self.data.embeddings.iter_mut().for_each(|p| resolve(base, p));
        for p in [&mut self.run_dir, &mut self.compare.other_config, &mut self.compare.other_run_dir].into_iter().flatten() {
            resolve(base, p);
        }
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.run_dir {
            self.run_dir = Some(d.clone());
        }
        if let Some(k) = o.k {
            self.cluster.k = Some(k);
        }
        if let Some(b) = o.backend {
            self.interpret.captioner.kind = b;
            self.interpret.chat.kind = b;
            self.compare.embedder.kind = b;
        }
    }

    /// Applies endpoint overrides from `lookup` (normally the process
    /// environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, backend) in [
            (ENV_CAPTION_ENDPOINT, &mut self.interpret.captioner),
            (ENV_CHAT_ENDPOINT, &mut self.interpret.chat),
            (ENV_EMBED_ENDPOINT, &mut self.compare.embedder),
        ] {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                backend.endpoint = Some(v);
            }
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.language.clone())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(self.label()))
    }

    pub fn segmenter(&self) -> SegmenterKind {
        self.data.segmenter.unwrap_or(if self.language == "en" {
            SegmenterKind::English
        } else if cfg!(feature = "jieba") {
            SegmenterKind::Jieba
        } else {
            SegmenterKind::Char
        })
    }

    /// Display names keyed by cluster id.
    pub fn names(&self) -> Result<BTreeMap<usize, String>, PipelineError> {
        self.cluster_names
            .iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|id| (id, v.clone()))
                    .map_err(|_| PipelineError::Config(format!("cluster_names key {k:?} is not a cluster id")))
            })
            .collect()
    }

    /// The model seed follows the run seed so one flag controls everything.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seed, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.model_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.data.rate_s > 0.0) {
            return bad(format!("data.rate_s must be positive, got {}", self.data.rate_s));
        }
        if self.data.embeddings.is_empty() {
            return bad("data.embeddings must list at least one embedding table".into());
        }
        if self.data.max_len == 0 {
            return bad("data.max_len must be positive".into());
        }
        if let Alignment::Uniform { keep, window } = self.data.alignment {
            if keep == 0 || window == 0 || keep > window {
                return bad(format!("uniform alignment needs 0 < keep ({keep}) <= window ({window})"));
            }
        }
        let c = &self.cluster;
        if c.k_min == 0 || c.k_min > c.k_max {
            return bad(format!("cluster.k_min ({}) must be in 1..=k_max ({})", c.k_min, c.k_max));
        }
        if c.restarts == 0 {
            return bad("cluster.restarts must be positive".into());
        }
        if c.k == Some(0) {
            return bad("K must be positive".into());
        }
        for b in [&self.interpret.captioner, &self.interpret.chat, &self.compare.embedder] {
            b.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.names()?;
        Ok(())
    }
}
