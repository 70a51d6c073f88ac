//! Experiment orchestration: single runs, method comparisons, the
//! importance/gradient-norm correlation study, per-step overhead timing and
//! importance snapshots for 2-D data. Every CSV written here starts with a
//! commented config echo.

pub mod config;
pub mod stats;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::data::{
    image_regression_dataset, load_mnist_idx, make_blobs, mnist_paths, subset, BlobSpec, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::importance::ImportanceKind;
use crate::model::{save_checkpoint, LossKind, MlpModel};
use crate::numerics::Rng;
use crate::trainer::{RunHistory, TrainConfig, TrainFailure, TrainOutcome, Trainer};

pub use config::{DatasetKind, ExperimentConfig, ExperimentKind, Method};
pub use stats::{pearson, spearman, Correlation};

pub struct Data {
    pub train: Dataset,
    /// Held-out split. For image regression this is the training set itself
    /// (every pixel is evaluated).
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Mnist => {
            let (ti, tl) = mnist_paths(&d.mnist_dir, Split::Train);
            let (vi, vl) = mnist_paths(&d.mnist_dir, Split::Test);
            let mut train = load_mnist_idx(&ti, &tl, Split::Train)?;
            let test = load_mnist_idx(&vi, &vl, Split::Test)?;
            if let Some(n) = d.subset {
                train = subset(&train, n, d.subset_seed)?;
            }
            Ok(Data { train, test })
        }
        DatasetKind::Blobs => {
            let spec = |seed| {
                let mut s = BlobSpec::three_class(seed);
                for c in &mut s.classes {
                    c.sigma = d.blob_sigma;
                }
                s
            };
            let train = make_blobs(&spec(d.blob_seed), Split::Train)?;
            let test = make_blobs(&spec(Rng::derive_seed(d.blob_seed, 1)), Split::Test)?;
            Ok(Data { train, test })
        }
        DatasetKind::Image => {
            let path = d
                .image
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.image is not set".into()))?;
            let train = image_regression_dataset(path)?;
            Ok(Data {
                test: train.clone(),
                train,
            })
        }
    }
}

/// Fresh model for one run; weights depend only on `seed`.
pub fn build_model(cfg: &ExperimentConfig, data: &Data, seed: u64) -> Result<MlpModel> {
    let mut dims = vec![data.train.dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(data.train.output_dim());
    let acts = vec![cfg.model.activation(); cfg.model.hidden.len()];
    MlpModel::init(dims, acts, cfg.loss_kind(), &mut Rng::new(Rng::derive_seed(seed, 1)))
}

/// Training settings for one `(method, seed)` run.
pub fn run_train_config(cfg: &ExperimentConfig, method: Method, seed: u64) -> TrainConfig {
    let importance = match (method, cfg.loss_kind()) {
        (Method::LossValueIs, _) => ImportanceKind::LossValue,
        (_, LossKind::SoftmaxCrossEntropy) => ImportanceKind::LossGradientAnalytic,
        (_, LossKind::SquaredError) => ImportanceKind::LossGradientNumeric,
    };
    TrainConfig {
        mode: method.mode(),
        seed,
        importance,
        ..cfg.train.clone()
    }
}

pub fn run_name(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}", method.name())
}

/// Config echo for a single run: the experiment narrowed to one method/seed.
pub fn run_echo(cfg: &ExperimentConfig, method: Method, seed: u64) -> Vec<(String, String)> {
    ExperimentConfig {
        methods: vec![method],
        seeds: vec![seed],
        ..cfg.clone()
    }
    .echo()
}

fn create(path: &Path, echo: &[(String, String)]) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in echo {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(w)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn steps_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("{name}_steps.csv"))
}

pub fn epochs_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("{name}_epochs.csv"))
}

fn write_history(out: &Path, name: &str, history: &RunHistory, echo: &[(String, String)]) -> Result<()> {
    let mut w = create(&steps_path(out, name), echo)?;
    history.write_steps_csv(&mut w, &[])?;
    w.flush()?;
    let mut w = create(&epochs_path(out, name), echo)?;
    history.write_epochs_csv(&mut w, &[])?;
    w.flush()?;
    Ok(())
}

/// Trains one `(method, seed)` run.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &Data,
    method: Method,
    seed: u64,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let model = match build_model(cfg, data, seed) {
        Ok(m) => m,
        Err(error) => {
            return Err(TrainFailure {
                error,
                last_good: MlpModel::new(vec![1, 1], vec![], cfg.loss_kind()).expect("trivial model"),
                history: RunHistory::default(),
            })
        }
    };
    crate::trainer::train(model, &data.train, Some(&data.test), run_train_config(cfg, method, seed))
}

/// The `train` subcommand: first method, first seed. Writes the two history
/// CSVs and `model.ckpt`, or `last_good.ckpt` when the run diverges.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = load_data(cfg)?;
    let (method, seed) = (cfg.methods[0], cfg.seeds[0]);
    let name = run_name(method, seed);
    let echo = run_echo(cfg, method, seed);
    std::fs::create_dir_all(&cfg.out)?;
    match train_run(cfg, &data, method, seed) {
        Ok(outcome) => {
            write_history(&cfg.out, &name, &outcome.history, &echo)?;
            save_checkpoint(&outcome.model, &cfg.out.join("model.ckpt"))?;
            Ok(outcome)
        }
        Err(failure) => {
            write_history(&cfg.out, &name, &failure.history, &echo)?;
            save_checkpoint(&failure.last_good, &cfg.out.join("last_good.ckpt"))?;
            Err(failure.error)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFinal {
    pub method: String,
    pub seed: u64,
    pub ok: bool,
    pub final_test_loss: Option<f64>,
    pub final_test_error: Option<f64>,
    pub time_to_threshold: Option<f64>,
    pub epochs_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_final_test_loss: Option<f64>,
    pub mean_final_test_error: Option<f64>,
    /// Mean over the runs that reached the threshold.
    pub mean_time_to_threshold: Option<f64>,
    pub reached_threshold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub runs: Vec<RunFinal>,
    pub methods: Vec<MethodSummary>,
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn run(&self, method: &str, seed: u64) -> Option<&RunFinal> {
        self.runs.iter().find(|r| r.method == method && r.seed == seed)
    }
}

const RUNS_HEADER: &str = "method,seed,status,message";

/// Recomputes the comparison summary from `runs.csv` and the per-run epoch
/// CSVs in `out`.
pub fn summarize(out: &Path, threshold: Option<f64>) -> Result<Summary> {
    use std::io::BufRead;
    let mut runs = Vec::new();
    let mut header_seen = false;
    for line in open(&out.join("runs.csv"))?.lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, ',').collect();
        if cols.len() < 3 {
            return Err(Error::Config(format!("bad runs.csv row {line:?}")));
        }
        let method = cols[0].to_string();
        let seed: u64 = cols[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad seed in runs.csv row {line:?}")))?;
        let ok = cols[2] == "ok";
        let mut r = RunFinal {
            method,
            seed,
            ok,
            final_test_loss: None,
            final_test_error: None,
            time_to_threshold: None,
            epochs_to_threshold: None,
        };
        if ok {
            let name = format!("{}_seed{}", r.method, r.seed);
            let epochs = RunHistory::read_epochs_csv(open(&epochs_path(out, &name))?)?;
            if let Some(last) = epochs.last() {
                r.final_test_loss = Some(last.test_loss);
                r.final_test_error = Some(last.test_error);
            }
            if let Some(t) = threshold {
                if let Some(hit) = epochs.iter().find(|e| e.test_error <= t) {
                    r.time_to_threshold = Some(hit.cum_seconds);
                    r.epochs_to_threshold = Some(hit.epoch);
                }
            }
        }
        runs.push(r);
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunFinal>> = BTreeMap::new();
    for r in &runs {
        if !groups.contains_key(&r.method) {
            order.push(r.method.clone());
        }
        groups.entry(r.method.clone()).or_default().push(r);
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let methods = order
        .iter()
        .map(|m| {
            let g = &groups[m];
            let times: Vec<f64> = g.iter().filter_map(|r| r.time_to_threshold).collect();
            MethodSummary {
                method: m.clone(),
                runs: g.len(),
                failed: g.iter().filter(|r| !r.ok).count(),
                mean_final_test_loss: mean(g.iter().filter_map(|r| r.final_test_loss).collect()),
                mean_final_test_error: mean(g.iter().filter_map(|r| r.final_test_error).collect()),
                reached_threshold: times.len(),
                mean_time_to_threshold: mean(times),
            }
        })
        .collect();
    Ok(Summary { runs, methods })
}

fn write_summary(out: &Path, summary: &Summary, echo: &[(String, String)]) -> Result<()> {
    let mut w = create(&out.join("final.csv"), echo)?;
    writeln!(
        w,
        "method,seed,status,final_test_loss,final_test_error,time_to_threshold_seconds,epochs_to_threshold"
    )?;
    for r in &summary.runs {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.method,
            r.seed,
            if r.ok { "ok" } else { "failed" },
            fmt_opt(r.final_test_loss),
            fmt_opt(r.final_test_error),
            fmt_opt(r.time_to_threshold),
            r.epochs_to_threshold.map_or_else(String::new, |e| e.to_string()),
        )?;
    }
    w.flush()?;
    let mut w = create(&out.join("summary.csv"), echo)?;
    writeln!(
        w,
        "method,runs,failed,mean_final_test_loss,mean_final_test_error,reached_threshold,mean_time_to_threshold_seconds"
    )?;
    for m in &summary.methods {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            m.method,
            m.runs,
            m.failed,
            fmt_opt(m.mean_final_test_loss),
            fmt_opt(m.mean_final_test_error),
            m.reached_threshold,
            fmt_opt(m.mean_time_to_threshold),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One run per `(method, seed)`; a failed run is recorded and the rest
/// proceed. Writes per-run histories, `runs.csv`, `final.csv` and
/// `summary.csv`.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Summary> {
    let data = load_data(cfg)?;
    std::fs::create_dir_all(&cfg.out)?;
    let echo = cfg.echo();
    let mut manifest = create(&cfg.out.join("runs.csv"), &echo)?;
    writeln!(manifest, "{RUNS_HEADER}")?;
    for &seed in &cfg.seeds {
        for &method in &cfg.methods {
            let name = run_name(method, seed);
            info!("run {name}");
            let run_echo = run_echo(cfg, method, seed);
            match train_run(cfg, &data, method, seed) {
                Ok(outcome) => {
                    write_history(&cfg.out, &name, &outcome.history, &run_echo)?;
                    writeln!(manifest, "{},{seed},ok,", method.name())?;
                }
                Err(failure) => {
                    warn!("run {name} failed: {}", failure.error);
                    write_history(&cfg.out, &name, &failure.history, &run_echo)?;
                    writeln!(
                        manifest,
                        "{},{seed},failed,{}",
                        method.name(),
                        csv_safe(&failure.error.to_string())
                    )?;
                }
            }
            manifest.flush()?;
        }
    }
    drop(manifest);
    let summary = summarize(&cfg.out, cfg.error_threshold)?;
    write_summary(&cfg.out, &summary, &echo)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindCorrelation {
    pub kind: String,
    pub pearson: Correlation,
    pub spearman: Correlation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub seed: u64,
    pub samples: usize,
    pub kinds: Vec<KindCorrelation>,
}

impl CorrelationReport {
    pub fn kind(&self, name: &str) -> Option<&KindCorrelation> {
        self.kinds.iter().find(|k| k.kind == name)
    }
}

/// Name of the reference column: the true per-sample gradient norm.
pub const GRADIENT_NORM: &str = "gradient_norm";

/// Correlates each importance proxy with the true per-sample parameter
/// gradient norm on `M` distinct random training points.
pub fn correlation_report(model: &MlpModel, train: &Dataset, samples: usize, seed: u64) -> Result<(CorrelationReport, Vec<usize>, Vec<Vec<f64>>)> {
    let n = train.len();
    let m = if samples > n {
        warn!("correlate_samples = {samples} exceeds the {n} training points; using {n}");
        n
    } else {
        samples
    };
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(Rng::derive_seed(seed, 3)).shuffle(&mut idx);
    idx.truncate(m);
    idx.sort_unstable();

    let mut kinds: Vec<(String, Option<ImportanceKind>)> = vec![(GRADIENT_NORM.into(), None)];
    if model.loss_kind() == LossKind::SoftmaxCrossEntropy {
        kinds.push((ImportanceKind::LossGradientAnalytic.name().into(), Some(ImportanceKind::LossGradientAnalytic)));
    }
    kinds.push((ImportanceKind::LossGradientNumeric.name().into(), Some(ImportanceKind::LossGradientNumeric)));
    kinds.push((ImportanceKind::LossValue.name().into(), Some(ImportanceKind::LossValue)));

    let mut columns = vec![Vec::with_capacity(m); kinds.len()];
    for &i in &idx {
        let (x, t) = (train.feature(i), train.target(i));
        let trace = model.forward(x)?;
        for (col, (_, kind)) in columns.iter_mut().zip(&kinds) {
            col.push(match kind {
                None => model.per_sample_gradient_norm(x, t)?,
                Some(k) => k.score(&trace, t)?,
            });
        }
    }
    let reference = &columns[0];
    let kinds_out = kinds
        .iter()
        .zip(&columns)
        .map(|((name, _), col)| {
            Ok(KindCorrelation {
                kind: name.clone(),
                pearson: pearson(col, reference)?,
                spearman: spearman(col, reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        CorrelationReport {
            seed,
            samples: m,
            kinds: kinds_out,
        },
        idx,
        columns,
    ))
}

/// For each seed: train `correlate_epochs` epochs with the first method, then
/// correlate. Writes per-sample values and `correlation.csv`.
pub fn run_correlate(cfg: &ExperimentConfig) -> Result<Vec<CorrelationReport>> {
    let data = load_data(cfg)?;
    if data.train.num_classes().is_none() {
        return Err(Error::Config("correlate needs a classification dataset".into()));
    }
    std::fs::create_dir_all(&cfg.out)?;
    let echo = cfg.echo();
    let method = cfg.methods[0];
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let model = build_model(cfg, &data, seed)?;
        let model = if cfg.correlate_epochs == 0 {
            model
        } else {
            let tc = TrainConfig {
                epochs: cfg.correlate_epochs,
                ..run_train_config(cfg, method, seed)
            };
            let mut trainer = Trainer::new(model, &data.train, Some(&data.test), tc)?;
            for _ in 0..cfg.correlate_epochs {
                trainer.run_epoch()?;
            }
            trainer.into_outcome().model
        };
        let (report, idx, columns) = correlation_report(&model, &data.train, cfg.correlate_samples, seed)?;
        let mut w = create(&cfg.out.join(format!("correlate_seed{seed}_samples.csv")), &echo)?;
        let names: Vec<&str> = report.kinds.iter().map(|k| k.kind.as_str()).collect();
        writeln!(w, "index,{}", names.join(","))?;
        for (r, &i) in idx.iter().enumerate() {
            let vals: Vec<String> = columns.iter().map(|c| c[r].to_string()).collect();
            writeln!(w, "{i},{}", vals.join(","))?;
        }
        w.flush()?;
        reports.push(report);
    }
    let mut w = create(&cfg.out.join("correlation.csv"), &echo)?;
    writeln!(w, "seed,kind,samples,pearson,spearman,pearson_degenerate,spearman_degenerate")?;
    for r in &reports {
        for k in &r.kinds {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.seed, k.kind, r.samples, k.pearson.value, k.spearman.value, k.pearson.degenerate, k.spearman.degenerate
            )?;
        }
    }
    w.flush()?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverheadRow {
    pub method: String,
    pub median_seconds: f64,
    /// `median / median_uniform − 1`.
    pub relative_overhead: f64,
    pub steps: usize,
}

/// Median per-step wall time of each method against the uniform baseline.
/// All methods start from the same weights and step in round-robin order so
/// slow drifts in machine load hit every method equally. The weighted
/// methods start from the all-ones prior: the initialization epoch is a
/// one-off cost outside the steady-state step being measured.
pub fn run_overhead(cfg: &ExperimentConfig) -> Result<Vec<OverheadRow>> {
    let data = load_data(cfg)?;
    let seed = cfg.seeds[0];
    let mut methods = cfg.methods.clone();
    let base = match methods.iter().position(|&m| m == Method::Uniform) {
        Some(i) => i,
        None => {
            methods.insert(0, Method::Uniform);
            0
        }
    };
    let model = build_model(cfg, &data, seed)?;
    let mut trainers = methods
        .iter()
        .map(|&m| {
            let tc = TrainConfig {
                check_invariants: false,
                epochs: usize::MAX,
                ..run_train_config(cfg, m, seed)
            };
            Trainer::new(model.clone(), &data.train, None, tc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(cfg.overhead_steps); trainers.len()];
    for round in 0..cfg.overhead_warmup + cfg.overhead_steps {
        for (t, tr) in trainers.iter_mut().enumerate() {
            let dt = tr.timed_step()?;
            if round >= cfg.overhead_warmup {
                times[t].push(dt);
            }
        }
    }
    let medians: Vec<f64> = times.iter().map(|v| stats::median(v).unwrap_or(f64::NAN)).collect();
    let rows: Vec<OverheadRow> = methods
        .iter()
        .zip(&medians)
        .map(|(m, &med)| OverheadRow {
            method: m.name().to_string(),
            median_seconds: med,
            relative_overhead: med / medians[base] - 1.0,
            steps: cfg.overhead_steps,
        })
        .collect();
    std::fs::create_dir_all(&cfg.out)?;
    let mut w = create(&cfg.out.join("overhead.csv"), &cfg.echo())?;
    writeln!(w, "method,median_seconds,relative_overhead,steps")?;
    for r in &rows {
        writeln!(w, "{},{},{},{}", r.method, r.median_seconds, r.relative_overhead, r.steps)?;
    }
    w.flush()?;
    Ok(rows)
}

pub struct SnapshotRun {
    pub seed: u64,
    pub files: Vec<(usize, PathBuf)>,
    /// Importance memory after the last epoch.
    pub final_q: Vec<f64>,
}

/// Requested snapshot epochs, capped at the final epoch and deduplicated.
pub fn snapshot_schedule(requested: &[usize], epochs: usize) -> Vec<usize> {
    let last = epochs.saturating_sub(1);
    let mut v: Vec<usize> = requested.iter().map(|&e| e.min(last)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

pub fn snapshot_path(out: &Path, seed: u64, epoch: usize) -> PathBuf {
    out.join(format!("snapshot_seed{seed}_epoch{epoch}.csv"))
}

/// Trains with the first method and writes `(index, x, y, q)` after each
/// scheduled epoch (epoch 0 is the initialization epoch).
pub fn run_snapshots(cfg: &ExperimentConfig) -> Result<Vec<SnapshotRun>> {
    let data = load_data(cfg)?;
    if data.train.dim() != 2 {
        return Err(Error::Config(format!(
            "snapshots need 2-D features; this dataset has {}",
            data.train.dim()
        )));
    }
    std::fs::create_dir_all(&cfg.out)?;
    let schedule = snapshot_schedule(&cfg.snapshot_epochs, cfg.train.epochs);
    let method = cfg.methods[0];
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let echo = run_echo(cfg, method, seed);
        let model = build_model(cfg, &data, seed)?;
        let mut trainer = Trainer::new(model, &data.train, Some(&data.test), run_train_config(cfg, method, seed))?;
        let mut files = Vec::new();
        for epoch in 0..cfg.train.epochs {
            trainer.run_epoch()?;
            if schedule.contains(&epoch) {
                let path = snapshot_path(&cfg.out, seed, epoch);
                let mut w = create(&path, &echo)?;
                writeln!(w, "index,x,y,q")?;
                for (i, q) in trainer.memory().values().iter().enumerate() {
                    let f = data.train.feature(i);
                    writeln!(w, "{i},{},{},{q}", f[0], f[1])?;
                }
                w.flush()?;
                files.push((epoch, path));
            }
        }
        runs.push(SnapshotRun {
            seed,
            files,
            final_q: trainer.memory().values().to_vec(),
        });
    }
    Ok(runs)
}
