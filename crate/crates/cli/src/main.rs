//! Command-line front end: one subcommand per pipeline stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crvae::interpret::BackendKind;
use crvae::pipeline::{self, Overrides, PipelineError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "crvae", version, about = "Encode, cluster and interpret aligned video frames and captions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Overrides the kind of every interpretation/comparison backend.
    #[arg(long, value_enum)]
    backend: Option<Backend>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Http,
    Command,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Mock => BackendKind::Mock,
            Backend::Http => BackendKind::Http,
            Backend::Command => BackendKind::Command,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample frames, parse the transcript and write the aligned manifest.
    Ingest(Common),
    /// Train the autoencoder on the manifest's pairs.
    Train(Common),
    /// Write latent means and teacher-forced verbalizations.
    Encode(Common),
    /// Fit K-means across the configured K range and project latents to 2-D.
    Sweep(Common),
    /// Fit the chosen K.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Number of clusters; overrides `cluster.k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Caption frames and generate ten tags per cluster.
    Interpret(Common),
    /// Compare this run's clusters with another run's.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Configuration of the other run.
        #[arg(long)]
        other: PathBuf,
        /// Overrides the other run's directory.
        #[arg(long)]
        other_run_dir: Option<PathBuf>,
    },
    /// Run every stage, then compare if `compare.other_config` is set.
    All {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write the bundled synthetic two-video dataset into a directory.
    MiniData { dir: PathBuf },
}

fn load(common: &Common, k: Option<usize>) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply_env(|v| std::env::var(v).ok());
    cfg.apply(&Overrides {
        seed: common.seed,
        run_dir: common.run_dir.clone(),
        k,
        backend: common.backend.map(Into::into),
    });
    Ok(cfg)
}

fn report_dir(cfg: &RunConfig) {
    println!("run directory: {}", cfg.run_dir().display());
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Ingest(c) => {
            let cfg = load(&c, None)?;
            let rows = pipeline::cmd_ingest(&cfg)?;
            println!("{} aligned pairs", rows.len());
            report_dir(&cfg);
        }
        Command::Train(c) => {
            let cfg = load(&c, None)?;
            let ck = pipeline::cmd_train(&cfg)?;
            if let (Some(first), Some(last)) = (ck.loss_curve.first(), ck.loss_curve.last()) {
                println!("trained {} epochs: total loss {:.6} -> {:.6}", ck.epoch, first.total, last.total);
            }
            report_dir(&cfg);
        }
        Command::Encode(c) => {
            let cfg = load(&c, None)?;
            let x = pipeline::cmd_encode(&cfg)?;
            println!("{} latent vectors of dimension {}", x.rows, x.dim);
            report_dir(&cfg);
        }
        Command::Sweep(c) => {
            let cfg = load(&c, None)?;
            let report = pipeline::cmd_sweep(&cfg)?;
            println!("{:>3} {:>12} {:>12} {:>10}  sizes", "K", "avg_intra", "avg_cross", "robust");
            for r in &report.rows {
                let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:>3} {:>12.4} {:>12} {:>10}  {:?}",
                    r.k,
                    r.avg_intra,
                    opt(r.avg_cross),
                    opt(r.robustness),
                    r.sizes
                );
            }
            report_dir(&cfg);
        }
        Command::Cluster { common, k } => {
            let cfg = load(&common, k)?;
            let c = pipeline::cmd_cluster(&cfg)?;
            println!("K = {}: sizes {:?}, inertia {:.6}", c.k, c.sizes(), c.inertia);
            report_dir(&cfg);
        }
        Command::Interpret(c) => {
            let cfg = load(&c, None)?;
            let s = pipeline::cmd_interpret(&cfg)?;
            println!("{} frame descriptions ({} failed)", s.descriptions.len(), s.failed_frames.len());
            for t in &s.tagsets {
                if t.interpreted {
                    println!("cluster {}: {}", t.cluster_id, t.tags.join("; "));
                } else {
                    println!("cluster {}: uninterpreted", t.cluster_id);
                }
            }
            report_dir(&cfg);
        }
        Command::Compare { common, other, other_run_dir } => {
            let cfg = load(&common, None)?;
            let mut b = RunConfig::load(&other)?;
            b.apply_env(|v| std::env::var(v).ok());
            b.apply(&Overrides { run_dir: other_run_dir, backend: common.backend.map(Into::into), ..Default::default() });
            let m = pipeline::cmd_compare(&cfg, &b)?;
            print_matrix(&m);
            report_dir(&cfg);
        }
        Command::All { common, k } => {
            let cfg = load(&common, k)?;
            if let Some(m) = pipeline::cmd_all(&cfg, common.backend.map(Into::into))? {
                print_matrix(&m);
            }
            report_dir(&cfg);
        }
        Command::MiniData { dir } => {
            pipeline::write_mini_dataset(&dir)?;
            println!("wrote {}", Path::new(&dir).display());
        }
    }
    Ok(())
}

fn print_matrix(m: &crvae::compare::PairSimilarityMatrix) {
    print!("{:>14}", "");
    for c in &m.col_names {
        print!(" {c:>10}");
    }
    println!();
    for (name, row) in m.row_names.iter().zip(&m.values) {
        print!("{name:>14}");
        for v in row {
            print!(" {v:>10.4}");
        }
        println!();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
