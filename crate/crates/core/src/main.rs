use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use isgd::harness::{self, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "isgd", version, about = "Importance-sampled mini-batch training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model (first method, first seed) and save a checkpoint.
    Train(Common),
    /// Train every (method, seed) pair and summarize.
    Compare(Common),
    /// Correlate importance proxies with the true per-sample gradient norm.
    Correlate(Common),
    /// Median per-step time of each method against uniform sampling.
    Overhead(Common),
    /// Export per-epoch importance snapshots for a 2-D dataset.
    Snapshots(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (key = value with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset: mnist, blobs or image.
    #[arg(long)]
    dataset: Option<String>,
}

fn load(kind: ExperimentKind, c: &Common) -> isgd::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(d) = &c.dataset {
        cfg.dataset.kind = d.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

fn run(cli: Cli) -> isgd::Result<()> {
    let (kind, common) = match &cli.command {
        Command::Train(c) => (ExperimentKind::Train, c),
        Command::Compare(c) => (ExperimentKind::Compare, c),
        Command::Correlate(c) => (ExperimentKind::Correlate, c),
        Command::Overhead(c) => (ExperimentKind::Overhead, c),
        Command::Snapshots(c) => (ExperimentKind::Snapshots, c),
    };
    let cfg = load(kind, common)?;
    match kind {
        ExperimentKind::Train => {
            let out = harness::run_train(&cfg)?;
            if let Some(e) = out.history.epochs.last() {
                println!("final test_loss={:.6} test_error={:.6}", e.test_loss, e.test_error);
            }
        }
        ExperimentKind::Compare => {
            let s = harness::run_compare(&cfg)?;
            println!("method runs failed mean_final_test_loss mean_final_test_error mean_time_to_threshold");
            for m in &s.methods {
                println!(
                    "{} {} {} {} {} {}",
                    m.method,
                    m.runs,
                    m.failed,
                    opt(m.mean_final_test_loss),
                    opt(m.mean_final_test_error),
                    opt(m.mean_time_to_threshold)
                );
            }
        }
        ExperimentKind::Correlate => {
            for r in harness::run_correlate(&cfg)? {
                for k in &r.kinds {
                    let flag = if k.spearman.degenerate { " (degenerate)" } else { "" };
                    println!(
                        "seed={} kind={} samples={} pearson={:.4} spearman={:.4}{flag}",
                        r.seed, k.kind, r.samples, k.pearson.value, k.spearman.value
                    );
                }
            }
        }
        ExperimentKind::Overhead => {
            for r in harness::run_overhead(&cfg)? {
                println!(
                    "{} median_step={:.3}ms overhead={:+.2}%",
                    r.method,
                    r.median_seconds * 1e3,
                    r.relative_overhead * 100.0
                );
            }
        }
        ExperimentKind::Snapshots => {
            for r in harness::run_snapshots(&cfg)? {
                for (epoch, path) in &r.files {
                    println!("seed={} epoch={epoch} {}", r.seed, path.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
