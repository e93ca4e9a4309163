//! Stage-level behavior of the pipeline on the bundled mini dataset.

use std::path::{Path, PathBuf};

use crvae::pipeline::{
    cmd_all, cmd_cluster, cmd_encode, cmd_ingest, cmd_interpret, cmd_sweep, cmd_train, write_mini_dataset, Overrides,
    PipelineError, RunConfig, RunDirectory, Stage,
};

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini")
}

fn en_config(run_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&mini().join("en/config.toml")).unwrap();
    cfg.apply(&Overrides { run_dir: Some(run_dir.to_path_buf()), ..Default::default() });
    cfg.compare.other_run_dir = Some(run_dir.with_extension("zh"));
    cfg
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn checked_in_mini_dataset_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_mini_dataset(dir.path()).unwrap();
    let fresh = files_under(dir.path());
    assert_eq!(fresh, files_under(&mini()));
    for f in fresh {
        let a = std::fs::read(dir.path().join(&f)).unwrap();
        let b = std::fs::read(mini().join(&f)).unwrap();
        assert!(a == b, "{} differs from the checked-in copy", f.display());
    }
}

#[test]
fn full_run_is_reproducible_across_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = cmd_all(&en_config(&a), None).unwrap().expect("comparison configured");
    let mb = cmd_all(&en_config(&b), None).unwrap().expect("comparison configured");
    assert_eq!(ma, mb);
    assert!(ma.is_sorted());
    assert!(ma.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));

    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for f in &files {
        // Timings and the resolved configuration mention the run itself.
        if f.starts_with("logs") || f == Path::new("config.toml") {
            continue;
        }
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{} differs between identical runs", f.display());
    }
    for expected in [
        "manifest.csv",
        "checkpoint/model.ckpt",
        "latents/latents.csv",
        "sweep/k_sweep.csv",
        "cluster/k4/assignments.csv",
        "interpret/descriptions.csv",
        "interpret/tags/cluster_0.json",
        "compare/heatmap.csv",
        "compare/heatmap.json",
        "compare/heatmap.svg",
    ] {
        assert!(files.iter().any(|f| f == Path::new(expected)), "missing {expected}");
    }
    let csv = std::fs::read_to_string(a.join("latents/latents.csv")).unwrap();
    assert!(csv.starts_with("# seed=0\n"), "{}", &csv[..20]);
    assert!(!a.join("run.lock").exists());
}

#[test]
fn reingest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = en_config(dir.path());
    let first = cmd_ingest(&cfg).unwrap();
    let run = RunDirectory::new(dir.path());
    let manifest = std::fs::read(run.manifest()).unwrap();
    let frames = files_under(&run.frames_dir());
    assert_eq!(cmd_ingest(&cfg).unwrap(), first);
    assert_eq!(std::fs::read(run.manifest()).unwrap(), manifest);
    assert_eq!(files_under(&run.frames_dir()), frames);
    assert_eq!(frames.len(), first.len());
}

#[test]
fn stages_name_their_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = en_config(dir.path());
    type StageFn = fn(&RunConfig) -> Result<(), PipelineError>;
    let cases: [(StageFn, Stage); 5] = [
        (|c| cmd_train(c).map(drop), Stage::Ingest),
        (|c| cmd_encode(c).map(drop), Stage::Train),
        (|c| cmd_sweep(c).map(drop), Stage::Encode),
        (|c| cmd_cluster(c).map(drop), Stage::Encode),
        (|c| cmd_interpret(c).map(drop), Stage::Cluster),
    ];
    for (run, want) in cases {
        let e = run(&cfg).unwrap_err();
        match &e {
            PipelineError::MissingStage { stage, .. } => assert_eq!(*stage, want, "{e}"),
            other => panic!("expected a missing-stage error, got {other}"),
        }
        assert!(e.to_string().contains(want.name()), "{e}");
        assert_eq!(e.exit_code(), 1);
    }
}

#[test]
fn held_lock_blocks_a_second_invocation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = en_config(dir.path());
    let guard = RunDirectory::new(dir.path()).lock().unwrap();
    let e = cmd_ingest(&cfg).unwrap_err();
    assert!(matches!(e, PipelineError::Locked(_)), "{e}");
    drop(guard);
    cmd_ingest(&cfg).unwrap();
}

#[test]
fn k_outside_the_sweep_range_still_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = en_config(dir.path());
    cmd_ingest(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    cmd_encode(&cfg).unwrap();
    cfg.apply(&Overrides { k: Some(cfg.cluster.k_max + 1), ..Default::default() });
    let c = cmd_cluster(&cfg).unwrap();
    assert_eq!(c.k, cfg.cluster.k_max + 1);
    assert!(RunDirectory::new(dir.path()).assignments(c.k).exists());

    cfg.apply(&Overrides { k: Some(1000), ..Default::default() });
    let e = cmd_cluster(&cfg).unwrap_err();
    assert!(matches!(e, PipelineError::Config(_)), "{e}");
}
