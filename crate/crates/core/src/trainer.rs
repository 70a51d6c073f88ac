//! The training loop.
//!
//! Every run starts with an initialization epoch. In the weighted modes it is
//! a sequential pass over the data in batches of `B` that takes plain
//! mean-gradient steps and writes each sample's importance into the memory
//! directly. Each later epoch takes `⌊N/B⌋` steps of:
//!
//! 1. draw `B` indices with replacement ∝ `q`,
//! 2. forward/backward every drawn sample,
//! 3. weight the gradients (`1/p` or `N`) and form `(1/(N·B)) Σ w_i ∇ℓ_i`,
//! 4. apply the optimizer,
//! 5. fold the importance seen in step 2 into `q` with an EMA,
//!
//! and ends by adding the ε floor to the memory. The uniform baseline uses a
//! fresh shuffled permutation per epoch instead, never touching the memory.

use std::io::{BufRead, Write};
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{ImportanceKind, ImportanceMemory, MiniBatch, SamplingMode};
use crate::model::{loss_of, BatchWorkspace, LossKind, MlpModel, Target};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    /// Heavy-ball: `v ← μv + g`, `θ ← θ − ηv`.
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state aligned with the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::SgdMomentum { .. } => (vec![0.0; n_params], Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Self {
            kind,
            first,
            second,
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update. Rejects non-finite gradients without touching `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::contract(format!(
                "gradient length {} does not match {} parameters",
                grad.len(),
                params.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::contract(format!("non-finite gradient at parameter {i}")));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

pub fn optimizer_step(params: &mut [f64], grad: &[f64], state: &mut Optimizer, lr: f64) -> Result<()> {
    state.step(params, grad, lr)
}

/// Divide the learning rate by `divisor` at each listed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrDecay {
    pub epochs: Vec<usize>,
    pub divisor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: Option<LrDecay>,
    /// Total epochs, the initialization epoch included.
    pub epochs: usize,
    pub mode: SamplingMode,
    pub alpha: f64,
    pub epsilon_scale: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub importance: ImportanceKind,
    /// Run the `O(N log N)` memory/pdf invariant check after every step.
    pub check_invariants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: None,
            epochs: 10,
            mode: SamplingMode::ImportanceSampling,
            alpha: crate::importance::DEFAULT_ALPHA,
            epsilon_scale: crate::importance::DEFAULT_EPSILON_SCALE,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            importance: ImportanceKind::LossGradientAnalytic,
            check_invariants: cfg!(debug_assertions),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0,1]".into()));
        }
        if !(self.epsilon_scale >= 0.0 && self.epsilon_scale.is_finite()) {
            return Err(Error::Config("epsilon_scale must be >= 0".into()));
        }
        if let Some(d) = &self.lr_decay {
            if !(d.divisor > 0.0) {
                return Err(Error::Config("lr decay divisor must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match &self.lr_decay {
            Some(d) => {
                let k = d.epochs.iter().filter(|&&e| e <= epoch).count() as i32;
                self.learning_rate / d.divisor.powi(k)
            }
            None => self.learning_rate,
        }
    }
}

/// `∇̂L = (1/(N·B)) Σ_i w_i ∇ℓ_i`, flat and aligned with θ.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate(pub Vec<f64>);

/// Monte Carlo gradient estimate from explicit per-sample gradients.
pub fn estimate_gradient(batch: &MiniBatch, per_sample_grads: &[Vec<f64>], n: usize) -> Result<GradientEstimate> {
    if batch.is_empty() || per_sample_grads.len() != batch.len() || batch.weights.len() != batch.len() {
        return Err(Error::contract(format!(
            "{} gradients for a batch of {}",
            per_sample_grads.len(),
            batch.len()
        )));
    }
    let dim = per_sample_grads[0].len();
    if per_sample_grads.iter().any(|g| g.len() != dim) {
        return Err(Error::contract("per-sample gradients differ in length"));
    }
    let denom = n as f64 * batch.len() as f64;
    let mut out = vec![0.0; dim];
    for (g, &w) in per_sample_grads.iter().zip(&batch.weights) {
        let scale = w / denom;
        for (o, gi) in out.iter_mut().zip(g) {
            *o += scale * gi;
        }
    }
    Ok(GradientEstimate(out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean unweighted loss over the drawn batch.
    pub train_loss: f64,
    /// Training wall time so far; evaluation passes are excluded.
    pub cum_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_loss: f64,
    /// Classification error rate, or per-component MSE for regression.
    pub test_error: f64,
    pub cum_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const STEPS_HEADER: &str = "epoch,step,train_loss,cum_seconds";
pub const EPOCHS_HEADER: &str = "epoch,test_loss,test_error,cum_seconds";

fn write_echo<W: Write>(w: &mut W, echo: &[(String, String)]) -> Result<()> {
    for (k, v) in echo {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

fn data_lines<R: BufRead>(r: R, header: &str) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in r.lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line.trim() != header {
                return Err(Error::Config(format!("unexpected CSV header {line:?}, expected {header:?}")));
            }
            seen_header = true;
            continue;
        }
        rows.push(line.split(',').map(|s| s.trim().to_string()).collect());
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(row: &[String], i: usize) -> Result<T> {
    row.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("bad CSV row {row:?}")))
}

impl RunHistory {
    pub fn write_steps_csv<W: Write>(&self, mut w: W, echo: &[(String, String)]) -> Result<()> {
        write_echo(&mut w, echo)?;
        writeln!(w, "{STEPS_HEADER}")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{}", s.epoch, s.step, s.train_loss, s.cum_seconds)?;
        }
        Ok(())
    }

    pub fn write_epochs_csv<W: Write>(&self, mut w: W, echo: &[(String, String)]) -> Result<()> {
        write_echo(&mut w, echo)?;
        writeln!(w, "{EPOCHS_HEADER}")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{}", e.epoch, e.test_loss, e.test_error, e.cum_seconds)?;
        }
        Ok(())
    }

    pub fn read_steps_csv<R: BufRead>(r: R) -> Result<Vec<StepRecord>> {
        data_lines(r, STEPS_HEADER)?
            .iter()
            .map(|row| {
                Ok(StepRecord {
                    epoch: field(row, 0)?,
                    step: field(row, 1)?,
                    train_loss: field(row, 2)?,
                    cum_seconds: field(row, 3)?,
                })
            })
            .collect()
    }

    pub fn read_epochs_csv<R: BufRead>(r: R) -> Result<Vec<EpochRecord>> {
        data_lines(r, EPOCHS_HEADER)?
            .iter()
            .map(|row| {
                Ok(EpochRecord {
                    epoch: field(row, 0)?,
                    test_loss: field(row, 1)?,
                    test_error: field(row, 2)?,
                    cum_seconds: field(row, 3)?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    /// Error rate (argmax, lowest index wins ties) or per-component MSE.
    pub error: f64,
}

/// Full deterministic pass over a split.
pub fn evaluate(model: &MlpModel, ds: &Dataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty split"));
    }
    if ds.dim() != model.input_dim() {
        return Err(Error::contract("dataset width does not match the model input"));
    }
    const CHUNK: usize = 256;
    let mut bws = BatchWorkspace::new(model);
    let mut loss = 0.0;
    let mut wrong = 0usize;
    let mut xs: Vec<&[f64]> = Vec::with_capacity(CHUNK);
    for start in (0..ds.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(ds.len());
        xs.clear();
        xs.extend((start..end).map(|i| ds.feature(i)));
        model.forward_batch(&xs, &mut bws);
        for i in start..end {
            let z = bws.logits(i - start);
            let target = ds.target(i);
            loss += loss_of(model.loss_kind(), z, target);
            if let Target::Class(c) = target {
                if MlpModel::predict_class(z) != *c {
                    wrong += 1;
                }
            }
        }
    }
    let n = ds.len() as f64;
    let mean_loss = loss / n;
    let error = match model.loss_kind() {
        LossKind::SoftmaxCrossEntropy => wrong as f64 / n,
        LossKind::SquaredError => mean_loss / model.output_dim() as f64,
    };
    Ok(Evaluation { mean_loss, error })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: RunHistory,
    pub memory: ImportanceMemory,
}

/// A run that stopped on a non-finite loss or gradient. `last_good` holds the
/// parameters from before the failing step.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: MlpModel,
    pub history: RunHistory,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainFailure {}

/// Stepwise driver for one training run.
pub struct Trainer<'a> {
    model: MlpModel,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    config: TrainConfig,
    memory: ImportanceMemory,
    optimizer: Optimizer,
    rng: Rng,
    bws: BatchWorkspace,
    grad: Vec<f64>,
    importance_buf: Vec<f64>,
    permutation: Vec<usize>,
    perm_cursor: usize,
    epoch: usize,
    global_step: usize,
    elapsed: f64,
    history: RunHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(model: MlpModel, train: &'a Dataset, test: Option<&'a Dataset>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if train.dim() != model.input_dim() {
            return Err(Error::contract(format!(
                "dataset has {} features, model expects {}",
                train.dim(),
                model.input_dim()
            )));
        }
        model.check_target(train.target(0))?;
        if let Some(t) = test {
            if t.dim() != model.input_dim() {
                return Err(Error::contract("test split width does not match the model"));
            }
        }
        if config.importance == ImportanceKind::LossGradientAnalytic
            && model.loss_kind() != LossKind::SoftmaxCrossEntropy
            && config.mode != SamplingMode::Uniform
        {
            return Err(Error::Config(
                "analytic loss-gradient importance needs cross-entropy; use loss_gradient_numeric".into(),
            ));
        }
        let memory = ImportanceMemory::new(train.len(), config.alpha, config.epsilon_scale)?;
        let optimizer = Optimizer::new(config.optimizer, model.params().len());
        let bws = BatchWorkspace::new(&model);
        let grad = vec![0.0; model.params().len()];
        Ok(Self {
            rng: Rng::new(Rng::derive_seed(config.seed, 2)),
            permutation: (0..train.len()).collect(),
            perm_cursor: 0,
            importance_buf: Vec::with_capacity(config.batch_size),
            model,
            train,
            test,
            config,
            memory,
            optimizer,
            bws,
            grad,
            epoch: 0,
            global_step: 0,
            elapsed: 0.0,
            history: RunHistory::default(),
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn memory(&self) -> &ImportanceMemory {
        &self.memory
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.train.len() / self.config.batch_size).max(1)
    }

    fn weighted(&self) -> bool {
        self.config.mode != SamplingMode::Uniform
    }

    fn diverged(&self, reason: String) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            step: self.global_step,
            reason,
        }
    }

    /// Forward/backward over `indices` with per-sample gradient scales,
    /// then one optimizer step. Records importance when `score` is set.
    fn apply_batch(&mut self, indices: &[usize], scales: &[f64], score: bool) -> Result<f64> {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.importance_buf.clear();
        let xs: Vec<&[f64]> = indices.iter().map(|&i| self.train.feature(i)).collect();
        let targets: Vec<&Target> = indices.iter().map(|&i| self.train.target(i)).collect();
        self.model
            .accumulate_batch(&xs, &targets, scales, &mut self.grad, &mut self.bws);
        let mut loss_sum = 0.0;
        for (s, (&i, &loss)) in indices.iter().zip(self.bws.losses()).enumerate() {
            if !loss.is_finite() {
                return Err(self.diverged(format!("non-finite loss on sample {i}")));
            }
            loss_sum += loss;
            if score {
                let q = self
                    .config
                    .importance
                    .score_logits(self.model.loss_kind(), self.bws.logits(s), targets[s])?;
                self.importance_buf.push(q);
            }
        }
        let lr = self.config.lr_at_epoch(self.epoch);
        self.optimizer
            .step(self.model.params_mut(), &self.grad, lr)
            .map_err(|e| self.diverged(e.to_string()))?;
        if let Some(i) = self.model.params().iter().position(|p| !p.is_finite()) {
            return Err(self.diverged(format!("parameter {i} became non-finite")));
        }
        Ok(loss_sum / indices.len() as f64)
    }

    fn record_step(&mut self, started: Instant, train_loss: f64) {
        self.elapsed += started.elapsed().as_secs_f64();
        self.global_step += 1;
        self.history.steps.push(StepRecord {
            epoch: self.epoch,
            step: self.global_step,
            train_loss,
            cum_seconds: self.elapsed,
        });
    }

    /// Sequential pass over all samples with mean-gradient steps. Every
    /// sample's importance is assigned directly (no EMA).
    pub fn initialization_epoch(&mut self) -> Result<()> {
        if self.epoch != 0 {
            return Err(Error::contract("the initialization epoch must come first"));
        }
        let n = self.train.len();
        let b = self.config.batch_size;
        let mut start = 0;
        while start < n {
            let t0 = Instant::now();
            let end = (start + b).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let scales = vec![1.0 / indices.len() as f64; indices.len()];
            let loss = self.apply_batch(&indices, &scales, true)?;
            for (&i, &q) in indices.iter().zip(&self.importance_buf) {
                self.memory.set(i, q)?;
            }
            self.record_step(t0, loss);
            start = end;
        }
        self.finish_epoch(false)
    }

    /// One step of the main loop in a weighted mode.
    pub fn weighted_step(&mut self) -> Result<f64> {
        let t0 = Instant::now();
        let n = self.train.len();
        let batch = self
            .memory
            .sample_batch(self.config.batch_size, &mut self.rng, self.config.mode)?;
        let denom = n as f64 * batch.len() as f64;
        let scales: Vec<f64> = batch.weights.iter().map(|w| w / denom).collect();
        let loss = self.apply_batch(&batch.indices, &scales, true)?;
        for (&i, &q) in batch.indices.iter().zip(&self.importance_buf) {
            self.memory.ema_update(i, q)?;
        }
        if self.config.check_invariants {
            self.memory.check_invariants()?;
        }
        self.record_step(t0, loss);
        Ok(loss)
    }

    /// One uniform step over `permutation[offset..offset + B]`.
    fn uniform_step(&mut self, offset: usize) -> Result<f64> {
        let t0 = Instant::now();
        let n = self.train.len();
        let b = self.config.batch_size.min(n);
        let indices: Vec<usize> = self.permutation[offset..offset + b].to_vec();
        let denom = n as f64 * b as f64;
        let scales = vec![n as f64 / denom; b];
        let loss = self.apply_batch(&indices, &scales, false)?;
        self.record_step(t0, loss);
        Ok(loss)
    }

    /// Timed single step for overhead measurements. Uniform steps walk a
    /// shuffled permutation, reshuffling once it is exhausted.
    pub fn timed_step(&mut self) -> Result<f64> {
        let t0 = Instant::now();
        if self.weighted() {
            self.weighted_step()?;
        } else {
            let b = self.config.batch_size.min(self.train.len());
            if self.perm_cursor + b > self.train.len() {
                self.perm_cursor = 0;
            }
            if self.perm_cursor == 0 {
                self.rng.shuffle(&mut self.permutation);
            }
            let offset = self.perm_cursor;
            self.perm_cursor += b;
            self.uniform_step(offset)?;
        }
        Ok(t0.elapsed().as_secs_f64())
    }

    /// Runs the next epoch (initialization epoch first) and evaluates.
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.epoch >= self.config.epochs {
            return Err(Error::contract("all configured epochs already ran"));
        }
        if self.epoch == 0 && self.weighted() {
            return self.initialization_epoch();
        }
        let steps = self.steps_per_epoch();
        if self.weighted() {
            for _ in 0..steps {
                self.weighted_step()?;
            }
            self.finish_epoch(true)
        } else {
            self.rng.shuffle(&mut self.permutation);
            let b = self.config.batch_size.min(self.train.len());
            for s in 0..steps {
                self.uniform_step(s * b)?;
            }
            self.finish_epoch(false)
        }
    }

    fn finish_epoch(&mut self, floor: bool) -> Result<()> {
        if floor {
            let t0 = Instant::now();
            self.memory.epoch_floor();
            self.elapsed += t0.elapsed().as_secs_f64();
        }
        let split = self.test.unwrap_or(self.train);
        let eval = evaluate(&self.model, split)?;
        self.history.epochs.push(EpochRecord {
            epoch: self.epoch,
            test_loss: eval.mean_loss,
            test_error: eval.error,
            cum_seconds: self.elapsed,
        });
        self.epoch += 1;
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            history: self.history,
            memory: self.memory,
        }
    }

    fn into_failure(self, error: Error) -> TrainFailure {
        TrainFailure {
            error,
            last_good: self.model,
            history: self.history,
        }
    }

    /// Runs all remaining epochs.
    pub fn run(mut self) -> std::result::Result<TrainOutcome, TrainFailure> {
        while self.epoch < self.config.epochs {
            if let Err(e) = self.run_epoch() {
                // parameters are only written after a successful check
                return Err(self.into_failure(e));
            }
        }
        Ok(self.into_outcome())
    }
}

/// Trains `model` on `train`, evaluating on `test` (or `train`) every epoch.
pub fn train(
    model: MlpModel,
    train: &Dataset,
    test: Option<&Dataset>,
    config: TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fallback = model.clone();
    match Trainer::new(model, train, test, config) {
        Ok(t) => t.run(),
        Err(error) => Err(TrainFailure {
            error,
            last_good: fallback,
            history: RunHistory::default(),
        }),
    }
}
