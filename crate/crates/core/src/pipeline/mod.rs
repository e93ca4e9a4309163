//! Stage orchestration over a run directory.
//!
//! Stages run in a fixed order (ingest → train → encode → sweep → cluster →
//! interpret, plus compare across two runs). Each reads only the artifacts
//! of earlier stages from the run directory and writes its own, so any
//! stage can be re-run on its own with identical results for identical
//! inputs and seed.

mod config;
mod minidata;
mod rundir;
mod stages;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    Alignment, ClusterConfig, CompareConfig, DataConfig, InterpretConfig, Overrides, RunConfig, SegmenterKind,
    ENV_CAPTION_ENDPOINT, ENV_CHAT_ENDPOINT, ENV_EMBED_ENDPOINT,
};
pub use minidata::{
    write_mini_dataset, MINI_EMBED_DIM, MINI_EN_FRAMES, MINI_EN_RATE_S, MINI_FRAME_HW, MINI_ZH_FRAMES, MINI_ZH_RATE_S,
};
pub use rundir::{RunDirectory, RunLock};
pub use stages::{
    cmd_all, cmd_cluster, cmd_compare, cmd_encode, cmd_ingest, cmd_interpret, cmd_sweep, cmd_train, load_other,
    read_latents, read_tagsets, write_latents, InterpretSummary,
};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Ingest,
    Train,
    Encode,
    Sweep,
    Cluster,
    Interpret,
    Compare,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Train => "train",
            Stage::Encode => "encode",
            Stage::Sweep => "sweep",
            Stage::Cluster => "cluster",
            Stage::Interpret => "interpret",
            Stage::Compare => "compare",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing {}: run the `{stage}` stage first", path.display())]
    MissingStage { stage: Stage, path: PathBuf },
    #[error("run directory is locked by another invocation ({}); remove the file if no run is active", .0.display())]
    Locked(PathBuf),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 1 for problems the user can fix by changing the
    /// invocation, 2 for failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingStage { .. } | PipelineError::Locked(_) => 1,
            PipelineError::Stage { .. } | PipelineError::Io(_) => 2,
        }
    }
}
