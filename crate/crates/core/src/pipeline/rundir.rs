use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::{PipelineError, Stage};

/// Fixed layout of a run directory. Each stage writes below its own
/// subdirectory and reads only what earlier stages wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock_file(&self) -> PathBuf {
        self.root.join("run.lock")
    }
    pub fn config_copy(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }
    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }
    pub fn frame(&self, frame_index: usize) -> PathBuf {
        self.frames_dir().join(format!("frame_{frame_index:05}.png"))
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoint")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("model.ckpt")
    }
    pub fn latents_dir(&self) -> PathBuf {
        self.root.join("latents")
    }
    pub fn latents(&self) -> PathBuf {
        self.latents_dir().join("latents.csv")
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
    pub fn sweep_report(&self) -> PathBuf {
        self.sweep_dir().join("k_sweep.csv")
    }
    pub fn projection(&self) -> PathBuf {
        self.sweep_dir().join("tsne.csv")
    }
    pub fn cluster_dir(&self) -> PathBuf {
        self.root.join("cluster")
    }
    pub fn clustering_dir(&self, k: usize) -> PathBuf {
        self.cluster_dir().join(format!("k{k}"))
    }
    pub fn assignments(&self, k: usize) -> PathBuf {
        self.clustering_dir(k).join("assignments.csv")
    }
    pub fn selected_k(&self) -> PathBuf {
        self.cluster_dir().join("selected.json")
    }
    pub fn interpret_dir(&self) -> PathBuf {
        self.root.join("interpret")
    }
    pub fn descriptions(&self) -> PathBuf {
        self.interpret_dir().join("descriptions.csv")
    }
    pub fn tags_dir(&self) -> PathBuf {
        self.interpret_dir().join("tags")
    }
    pub fn tagset(&self, cluster: usize) -> PathBuf {
        self.tags_dir().join(format!("cluster_{cluster}.json"))
    }
    pub fn compare_dir(&self) -> PathBuf {
        self.root.join("compare")
    }
    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn timings(&self) -> PathBuf {
        self.logs_dir().join("timings.jsonl")
    }

    /// Fails with an error naming `stage` when `path` is missing.
    pub fn require(&self, path: &Path, stage: Stage) -> Result<(), PipelineError> {
        if path.exists() {
            Ok(())
        } else {
            Err(PipelineError::MissingStage { stage, path: path.to_path_buf() })
        }
    }

    /// Takes the run lock; fails if another invocation holds it.
    pub fn lock(&self) -> Result<RunLock, PipelineError> {
        std::fs::create_dir_all(&self.root)?;
        let path = self.lock_file();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }

    /// Appends one timing record to the log.
    pub fn log_timing(&self, stage: Stage, elapsed: Duration) -> Result<(), PipelineError> {
        #[derive(Serialize)]
        struct Record<'a> {
            stage: &'a str,
            seconds: f64,
            finished_unix_s: u64,
        }
        std::fs::create_dir_all(self.logs_dir())?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.timings())?;
        let rec = Record {
            stage: stage.name(),
            seconds: elapsed.as_secs_f64(),
            finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).map_err(|e| PipelineError::Config(e.to_string()))?)?;
        Ok(())
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Creates `path`'s parent directories and the file itself.
pub fn create_file(path: &Path) -> Result<File, PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDirectory::new(dir.path().join("r"));
        let guard = run.lock().unwrap();
        assert!(matches!(run.lock(), Err(PipelineError::Locked(_))));
        drop(guard);
        assert!(!run.lock_file().exists());
        run.lock().unwrap();
    }

    #[test]
    fn missing_artifact_names_stage() {
        let run = RunDirectory::new("/nonexistent/run");
        let e = run.require(&run.checkpoint(), Stage::Train).unwrap_err();
        assert!(e.to_string().contains("train"), "{e}");
    }

    #[test]
    fn timings_append() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDirectory::new(dir.path());
        run.log_timing(Stage::Ingest, Duration::from_millis(5)).unwrap();
        run.log_timing(Stage::Train, Duration::from_millis(5)).unwrap();
        let text = std::fs::read_to_string(run.timings()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains("\"stage\":\"ingest\""));
    }
}
