//! Line-based `key = value` configuration with `[section]` headers.
//!
//! ```text
//! experiment = compare
//! [dataset]
//! kind = mnist
//! subset = 10000
//! [train]
//! batch_size = 64
//! ```
//!
//! A key may also be written fully qualified (`train.batch_size = 64`) at the
//! top level, which is the form used by the commented echo block at the top
//! of every emitted CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::importance::SamplingMode;
use crate::model::{Activation, LossKind};
use crate::trainer::{LrDecay, OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    Compare,
    Correlate,
    Overhead,
    Snapshots,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Correlate => "correlate",
            ExperimentKind::Overhead => "overhead",
            ExperimentKind::Snapshots => "snapshots",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => ExperimentKind::Train,
            "compare" => ExperimentKind::Compare,
            "correlate" => ExperimentKind::Correlate,
            "overhead" => ExperimentKind::Overhead,
            "snapshots" => ExperimentKind::Snapshots,
            _ => return Err(Error::Config(format!("unknown experiment {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Blobs,
    Image,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Image => "image",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mnist" => DatasetKind::Mnist,
            "blobs" => DatasetKind::Blobs,
            "image" => DatasetKind::Image,
            _ => return Err(Error::Config(format!("unknown dataset {s:?} (mnist, blobs, image)"))),
        })
    }
}

/// A training method as compared by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Uniform,
    /// Importance sampling with loss-gradient importance.
    Is,
    /// Adaptive sampling with loss-gradient importance.
    As,
    /// Importance sampling with the per-sample loss as importance.
    LossValueIs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Uniform => "uniform",
            Method::Is => "is",
            Method::As => "as",
            Method::LossValueIs => "loss_value_is",
        }
    }

    pub fn mode(self) -> SamplingMode {
        match self {
            Method::Uniform => SamplingMode::Uniform,
            Method::Is | Method::LossValueIs => SamplingMode::ImportanceSampling,
            Method::As => SamplingMode::AdaptiveSampling,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => Method::Uniform,
            "is" => Method::Is,
            "as" => Method::As,
            "loss_value_is" => Method::LossValueIs,
            _ => return Err(Error::Config(format!("unknown method {s:?} (uniform, is, as, loss_value_is)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the four raw MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Stratified training subset size; `None` keeps the full split.
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub image: Option<PathBuf>,
    pub blob_seed: u64,
    pub blob_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            subset: None,
            subset_seed: 0,
            image: None,
            blob_seed: 0,
            blob_sigma: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    pub omega0: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: ActivationKind::Relu,
            omega0: 30.0,
        }
    }
}

impl ModelConfig {
    pub fn activation(&self) -> Activation {
        match self.activation {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Sine => Activation::Sine { omega0: self.omega0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Shared training settings; `seed` and `mode` are set per run.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Test error at which time-to-threshold is measured.
    pub error_threshold: Option<f64>,
    pub correlate_samples: usize,
    pub correlate_epochs: usize,
    pub overhead_steps: usize,
    pub overhead_warmup: usize,
    pub snapshot_epochs: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Train,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                check_invariants: false,
                ..TrainConfig::default()
            },
            methods: vec![Method::Is],
            seeds: vec![0],
            out: PathBuf::from("runs"),
            error_threshold: None,
            correlate_samples: 512,
            correlate_epochs: 1,
            overhead_steps: 500,
            overhead_warmup: 50,
            snapshot_epochs: vec![1, 10, 100],
        }
    }
}

fn list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {s:?}: {e}"))))
        .collect()
}

fn scalar<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Reads `[section]` / `key = value` lines into fully-qualified keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| at(format!("unterminated section header {line:?}")))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(at("empty key".into()));
        }
        let key = if section.is_empty() || k.contains('.') {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(at(format!("duplicate key {key}")));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::default();
        let mut momentum = 0.9;
        let (mut beta1, mut beta2, mut adam_eps) = (0.9, 0.999, 1e-8);
        let mut optimizer = "adam".to_string();
        let mut decay_epochs: Vec<usize> = Vec::new();
        let mut decay_divisor = 10.0;
        for (key, v) in &pairs {
            let k = key.as_str();
            // top-level keys belong to the experiment section
            let k = if k.contains('.') { k.to_string() } else { format!("experiment.{k}") };
            match k.as_str() {
                "experiment.experiment" | "experiment.kind" => cfg.kind = v.parse()?,
                "experiment.methods" => cfg.methods = list(v, key)?,
                "experiment.seeds" => cfg.seeds = list(v, key)?,
                "experiment.out" => cfg.out = PathBuf::from(v),
                "experiment.error_threshold" => {
                    cfg.error_threshold = if v == "none" { None } else { Some(scalar(v, key)?) }
                }
                "experiment.correlate_samples" => cfg.correlate_samples = scalar(v, key)?,
                "experiment.correlate_epochs" => cfg.correlate_epochs = scalar(v, key)?,
                "experiment.overhead_steps" => cfg.overhead_steps = scalar(v, key)?,
                "experiment.overhead_warmup" => cfg.overhead_warmup = scalar(v, key)?,
                "experiment.snapshot_epochs" => cfg.snapshot_epochs = list(v, key)?,
                "dataset.kind" => cfg.dataset.kind = v.parse()?,
                "dataset.mnist_dir" => cfg.dataset.mnist_dir = PathBuf::from(v),
                "dataset.subset" => {
                    cfg.dataset.subset = if v == "none" { None } else { Some(scalar(v, key)?) }
                }
                "dataset.subset_seed" => cfg.dataset.subset_seed = scalar(v, key)?,
                "dataset.image" => cfg.dataset.image = if v == "none" { None } else { Some(PathBuf::from(v)) },
                "dataset.blob_seed" => cfg.dataset.blob_seed = scalar(v, key)?,
                "dataset.blob_sigma" => cfg.dataset.blob_sigma = scalar(v, key)?,
                "model.hidden" => cfg.model.hidden = list(v, key)?,
                "model.activation" => {
                    cfg.model.activation = match v.as_str() {
                        "relu" => ActivationKind::Relu,
                        "sine" => ActivationKind::Sine,
                        _ => return Err(Error::Config(format!("{key}: unknown activation {v:?}"))),
                    }
                }
                "model.omega0" => cfg.model.omega0 = scalar(v, key)?,
                "train.batch_size" => cfg.train.batch_size = scalar(v, key)?,
                "train.learning_rate" => cfg.train.learning_rate = scalar(v, key)?,
                "train.epochs" => cfg.train.epochs = scalar(v, key)?,
                "train.alpha" => cfg.train.alpha = scalar(v, key)?,
                "train.epsilon_scale" => cfg.train.epsilon_scale = scalar(v, key)?,
                "train.optimizer" => optimizer = v.clone(),
                "train.momentum" => momentum = scalar(v, key)?,
                "train.beta1" => beta1 = scalar(v, key)?,
                "train.beta2" => beta2 = scalar(v, key)?,
                "train.adam_eps" => adam_eps = scalar(v, key)?,
                "train.lr_decay_epochs" => decay_epochs = list(v, key)?,
                "train.lr_decay_divisor" => decay_divisor = scalar(v, key)?,
                "train.check_invariants" => cfg.train.check_invariants = scalar(v, key)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
        }
        cfg.train.optimizer = match optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::SgdMomentum { momentum },
            "adam" => OptimizerKind::Adam {
                beta1,
                beta2,
                eps: adam_eps,
            },
            other => return Err(Error::Config(format!("unknown optimizer {other:?} (sgd, momentum, adam)"))),
        };
        if !decay_epochs.is_empty() {
            cfg.train.lr_decay = Some(LrDecay {
                epochs: decay_epochs,
                divisor: decay_divisor,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.dataset.kind == DatasetKind::Image && self.dataset.image.is_none() {
            return Err(Error::Config("dataset.image is required for the image dataset".into()));
        }
        if self.model.activation == ActivationKind::Sine && !(self.model.omega0 > 0.0) {
            return Err(Error::Config("model.omega0 must be > 0".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if self.correlate_samples < 2 {
            return Err(Error::Config("correlate_samples must be >= 2".into()));
        }
        self.train.validate()
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.dataset.kind {
            DatasetKind::Image => LossKind::SquaredError,
            _ => LossKind::SoftmaxCrossEntropy,
        }
    }

    /// Every setting as `section.key=value`, in a form `parse` accepts back.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("experiment.kind", self.kind.name().into());
        put("experiment.methods", self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
        put("experiment.seeds", join(&self.seeds));
        put("experiment.out", self.out.display().to_string());
        put(
            "experiment.error_threshold",
            self.error_threshold.map_or("none".into(), |t| t.to_string()),
        );
        put("experiment.correlate_samples", self.correlate_samples.to_string());
        put("experiment.correlate_epochs", self.correlate_epochs.to_string());
        put("experiment.overhead_steps", self.overhead_steps.to_string());
        put("experiment.overhead_warmup", self.overhead_warmup.to_string());
        put("experiment.snapshot_epochs", join(&self.snapshot_epochs));
        let d = &self.dataset;
        put("dataset.kind", d.kind.name().into());
        put("dataset.mnist_dir", d.mnist_dir.display().to_string());
        put("dataset.subset", d.subset.map_or("none".into(), |s| s.to_string()));
        put("dataset.subset_seed", d.subset_seed.to_string());
        put(
            "dataset.image",
            d.image.as_ref().map_or("none".into(), |p| p.display().to_string()),
        );
        put("dataset.blob_seed", d.blob_seed.to_string());
        put("dataset.blob_sigma", d.blob_sigma.to_string());
        put("model.hidden", join(&self.model.hidden));
        put(
            "model.activation",
            match self.model.activation {
                ActivationKind::Relu => "relu",
                ActivationKind::Sine => "sine",
            }
            .into(),
        );
        put("model.omega0", self.model.omega0.to_string());
        let t = &self.train;
        put("train.batch_size", t.batch_size.to_string());
        put("train.learning_rate", t.learning_rate.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.alpha", t.alpha.to_string());
        put("train.epsilon_scale", t.epsilon_scale.to_string());
        match t.optimizer {
            OptimizerKind::Sgd => put("train.optimizer", "sgd".into()),
            OptimizerKind::SgdMomentum { momentum } => {
                put("train.optimizer", "momentum".into());
                put("train.momentum", momentum.to_string());
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                put("train.optimizer", "adam".into());
                put("train.beta1", beta1.to_string());
                put("train.beta2", beta2.to_string());
                put("train.adam_eps", eps.to_string());
            }
        }
        if let Some(decay) = &t.lr_decay {
            put("train.lr_decay_epochs", join(&decay.epochs));
            put("train.lr_decay_divisor", decay.divisor.to_string());
        }
        put("train.check_invariants", t.check_invariants.to_string());
        e
    }
}
