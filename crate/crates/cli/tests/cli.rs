//! Exit codes and an end-to-end smoke run of the `crvae` binary.

use std::path::Path;
use std::process::{Command, Output};

fn crvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crvae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

#[test]
fn help_and_version_succeed() {
    for flag in ["--help", "--version"] {
        let out = crvae(&[flag]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    }
    assert!(text(&crvae(&["--help"])).contains("interpret"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(crvae(&[]).status.code(), Some(1));
    assert_eq!(crvae(&["train"]).status.code(), Some(1));
    assert_eq!(crvae(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 0\nno_such_key = 1\n").unwrap();
    let out = crvae(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    let out = crvae(&["ingest", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
}

#[test]
fn missing_stage_exits_with_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mini = dir.path().join("mini");
    assert_eq!(crvae(&["mini-data", mini.to_str().unwrap()]).status.code(), Some(0));
    let run = dir.path().join("run");
    let out = crvae(&[
        "encode",
        "--config",
        mini.join("en/config.toml").to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(text(&out).contains("`train`"), "{}", text(&out));
}

#[test]
fn all_runs_every_stage_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let mini = dir.path().join("mini");
    assert_eq!(crvae(&["mini-data", mini.to_str().unwrap()]).status.code(), Some(0));
    // Both runs land under the temp dir: the other run's directory is
    // pinned through a copy of the configuration.
    let cfg_path = mini.join("en/config.toml");
    let cfg = std::fs::read_to_string(&cfg_path).unwrap().replace(
        "other_config = \"../zh/config.toml\"",
        &format!("other_config = \"../zh/config.toml\"\nother_run_dir = {:?}", dir.path().join("zh-run")),
    );
    std::fs::write(&cfg_path, cfg).unwrap();
    let run = dir.path().join("en-run");
    let out = crvae(&[
        "all",
        "--config",
        cfg_path.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--backend",
        "mock",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    for f in ["compare/heatmap.csv", "interpret/tags.csv", "cluster/k4/assignments.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(Path::new(&dir.path().join("zh-run/interpret/tags.csv")).exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("zh-0"));
}
