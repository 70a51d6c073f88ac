//! End-to-end runs of the `isgd` binary on small synthetic data.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use isgd::data::{write_ppm, PpmImage};
use isgd::model::load_checkpoint;
use isgd::trainer::RunHistory;

fn isgd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isgd"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const BLOBS: &str = "\
seeds = 3
[dataset]
kind = blobs
blob_seed = 2
[model]
hidden = 8
[train]
batch_size = 16
learning_rate = 1e-2
epochs = 3
";

fn blobs_config(dir: &Path, extra: &str) {
    fs::write(dir.join("run.conf"), format!("{extra}\n{BLOBS}")).unwrap();
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn train_writes_checkpoint_and_histories() {
    let dir = tempfile::tempdir().unwrap();
    blobs_config(dir.path(), "methods = as");
    let out = isgd(&["train", "--config", "run.conf", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("final test_loss="));
    let model = load_checkpoint(&dir.path().join("o/model.ckpt")).unwrap();
    assert_eq!(model.dims(), &[2, 8, 3]);
    let file = fs::File::open(dir.path().join("o/as_seed3_epochs.csv")).unwrap();
    let epochs = RunHistory::read_epochs_csv(std::io::BufReader::new(file)).unwrap();
    assert_eq!(epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn compare_seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    blobs_config(dir.path(), "methods = uniform, is");
    let out = isgd(&["compare", "--config", "run.conf", "--out", "o", "--seed", "9"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("o/runs.csv"));
    assert_eq!(rows, vec!["method,seed,status,message", "uniform,9,ok,", "is,9,ok,"]);
    let summary = data_rows(&dir.path().join("o/summary.csv"));
    assert_eq!(summary.len(), 3);
}

#[test]
fn correlate_and_overhead_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    blobs_config(dir.path(), "methods = is\ncorrelate_samples = 100\noverhead_steps = 20\noverhead_warmup = 2");
    let out = isgd(&["correlate", "--config", "run.conf", "--out", "c"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = data_rows(&dir.path().join("c/correlation.csv"));
    assert!(table.iter().any(|l| l.contains("loss_gradient_analytic")));
    assert!(table.iter().any(|l| l.contains("loss_value")));
    assert_eq!(data_rows(&dir.path().join("c/correlate_seed3_samples.csv")).len(), 101);

    let out = isgd(&["overhead", "--config", "run.conf", "--out", "h"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&dir.path().join("h/overhead.csv"));
    // uniform is added as the baseline
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("uniform,") && rows[2].starts_with("is,"));
}

#[test]
fn snapshots_export_requested_epochs() {
    let dir = tempfile::tempdir().unwrap();
    blobs_config(dir.path(), "methods = is\nsnapshot_epochs = 0, 2, 40");
    let out = isgd(&["snapshots", "--config", "run.conf", "--out", "s"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for epoch in [0, 2] {
        let rows = data_rows(&dir.path().join(format!("s/snapshot_seed3_epoch{epoch}.csv")));
        assert_eq!(rows[0], "index,x,y,q");
        assert_eq!(rows.len(), 801);
    }
    assert!(!dir.path().join("s/snapshot_seed3_epoch40.csv").exists());
}

#[test]
fn image_regression_runs_from_a_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = (0..8 * 8).flat_map(|i| [(i * 4) as u8, 255 - (i * 4) as u8, 128]).collect();
    write_ppm(&PpmImage { width: 8, height: 8, rgb }, fs::File::create(dir.path().join("img.ppm")).unwrap()).unwrap();
    fs::write(
        dir.path().join("run.conf"),
        "methods = uniform, is\n[dataset]\nkind = image\nimage = img.ppm\n\
         [model]\nhidden = 16, 16\nactivation = sine\nomega0 = 10\n\
         [train]\nbatch_size = 16\nlearning_rate = 1e-3\nepochs = 2\n",
    )
    .unwrap();
    let out = isgd(&["compare", "--config", "run.conf", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_rows(&dir.path().join("o/final.csv")).len(), 3);
}

#[test]
fn bad_input_exits_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.conf"), "[train]\nbatch_sise = 4\n").unwrap();
    let out = isgd(&["train", "--config", "typo.conf"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("batch_sise"), "{err}");

    let out = isgd(&["compare", "--dataset", "image", "--out", "o"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("image"));

    let out = isgd(&["train", "--dataset", "mnist", "--out", "o"], dir.path());
    assert!(!out.status.success());

    let out = isgd(&["train", "--dataset", "nope"], dir.path());
    assert!(!out.status.success());

    let out = isgd(&["frobnicate"], dir.path());
    assert!(!out.status.success());
}
