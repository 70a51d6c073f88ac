//! Per-sample importance: scoring functions computed from a forward trace, the
//! persistent importance memory `q`, and weighted mini-batch sampling.
//!
//! The memory keeps unnormalized scores in a Fenwick tree so that drawing a
//! sample proportional to `q` and updating one entry both cost `O(log N)`.
//! The normalized pdf `p = q / Σq` is never materialized on the hot path; it
//! is only built by [`ImportanceMemory::to_pdf`] for snapshots and checks.

mod fenwick;

use std::io::Write;

pub use fenwick::FenwickTree;

use crate::error::{Error, Result};
use crate::model::{output_gradient_into, loss_of, ForwardTrace, LossKind, Target};
use crate::numerics::{l2_norm, softmax_into, Rng};

/// Relative ε floor applied at the end of each epoch.
pub const DEFAULT_EPSILON_SCALE: f64 = 1e-3;
/// EMA weight on the previous importance value.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    Uniform,
    /// Draw ∝ q, weight `1/p`.
    ImportanceSampling,
    /// Draw ∝ q, constant weight `N`.
    AdaptiveSampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImportanceKind {
    /// `‖s − onehot(y)‖` from the logits (cross-entropy only).
    LossGradientAnalytic,
    /// Norm of the generic output-layer loss gradient.
    LossGradientNumeric,
    /// The per-sample loss itself.
    LossValue,
}

impl ImportanceKind {
    pub fn score(self, trace: &ForwardTrace, target: &Target) -> Result<f64> {
        match self {
            ImportanceKind::LossGradientAnalytic => importance_cross_entropy(trace, target),
            ImportanceKind::LossGradientNumeric => importance_loss_gradient_numeric(trace, target),
            ImportanceKind::LossValue => importance_loss_value(trace, target),
        }
    }

    /// Same as [`Self::score`], from raw logits of a model with `loss_kind`.
    pub fn score_logits(self, loss_kind: LossKind, z: &[f64], target: &Target) -> Result<f64> {
        match self {
            ImportanceKind::LossGradientAnalytic => {
                if loss_kind != LossKind::SoftmaxCrossEntropy {
                    return Err(Error::contract("analytic loss-gradient importance needs cross-entropy"));
                }
                cross_entropy_from_logits(z, target)
            }
            ImportanceKind::LossGradientNumeric => loss_gradient_from_logits(loss_kind, z, target),
            ImportanceKind::LossValue => loss_value_from_logits(loss_kind, z, target),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ImportanceKind::LossGradientAnalytic => "loss_gradient_analytic",
            ImportanceKind::LossGradientNumeric => "loss_gradient_numeric",
            ImportanceKind::LossValue => "loss_value",
        }
    }
}

fn trace_kind(trace: &ForwardTrace) -> Result<LossKind> {
    trace
        .loss_kind
        .ok_or_else(|| Error::contract("trace does not record its loss kind"))
}

fn check_class(z: &[f64], target: &Target) -> Result<usize> {
    match target {
        Target::Class(c) if *c < z.len() => Ok(*c),
        Target::Class(c) => Err(Error::contract(format!("class {c} out of range"))),
        Target::Value(_) => Err(Error::contract("classification importance needs a class target")),
    }
}

fn check_target(kind: LossKind, z: &[f64], target: &Target) -> Result<()> {
    match (kind, target) {
        (LossKind::SoftmaxCrossEntropy, _) => {
            check_class(z, target)?;
        }
        (LossKind::SquaredError, Target::Value(v)) if v.len() == z.len() => {}
        (LossKind::SquaredError, _) => {
            return Err(Error::contract("regression importance needs a value target of output length"))
        }
    }
    Ok(())
}

/// Norm of the cross-entropy gradient at the logits, `‖s − onehot(y)‖₂`.
///
/// `1 − s_y` is accumulated from the other classes so confident predictions
/// keep full relative precision.
pub fn importance_cross_entropy(trace: &ForwardTrace, target: &Target) -> Result<f64> {
    cross_entropy_from_logits(trace.logits(), target)
}

fn cross_entropy_from_logits(z: &[f64], target: &Target) -> Result<f64> {
    let y = check_class(z, target)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite logits"));
    }
    let mut s = [0.0; 16];
    let mut heap;
    let s: &mut [f64] = if z.len() <= s.len() {
        &mut s[..z.len()]
    } else {
        heap = vec![0.0; z.len()];
        &mut heap
    };
    softmax_into(z, s);
    let mut rest = 0.0;
    let mut sq = 0.0;
    for (j, &sj) in s.iter().enumerate() {
        if j != y {
            rest += sj;
            sq += sj * sj;
        }
    }
    Ok((sq + rest * rest).sqrt())
}

/// Norm of the model's output-layer loss gradient, for either loss kind.
pub fn importance_loss_gradient_numeric(trace: &ForwardTrace, target: &Target) -> Result<f64> {
    loss_gradient_from_logits(trace_kind(trace)?, trace.logits(), target)
}

fn loss_gradient_from_logits(kind: LossKind, z: &[f64], target: &Target) -> Result<f64> {
    check_target(kind, z, target)?;
    let mut g = vec![0.0; z.len()];
    output_gradient_into(kind, z, target, &mut g);
    Ok(l2_norm(&g))
}

/// The loss value, floored at zero.
pub fn importance_loss_value(trace: &ForwardTrace, target: &Target) -> Result<f64> {
    loss_value_from_logits(trace_kind(trace)?, trace.logits(), target)
}

fn loss_value_from_logits(kind: LossKind, z: &[f64], target: &Target) -> Result<f64> {
    check_target(kind, z, target)?;
    Ok(loss_of(kind, z, target).max(0.0))
}

/// Normalized sampling distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Pdf {
    pub p: Vec<f64>,
    /// True when `Σq` was zero and the uniform fallback was used.
    pub fallback: bool,
}

impl Pdf {
    pub fn check(&self, q: &[f64]) -> Result<()> {
        let sum: f64 = self.p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("pdf sums to {sum}")));
        }
        for (i, (&p, &qi)) in self.p.iter().zip(q).enumerate() {
            if !(p >= 0.0) || (qi > 0.0 && p <= 0.0) {
                return Err(Error::contract(format!("pdf entry {i} is {p} for q = {qi}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
    pub fallback: bool,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Persistent unnormalized importance `q` with its prefix-sum tree.
#[derive(Clone, Debug)]
pub struct ImportanceMemory {
    q: Vec<f64>,
    tree: FenwickTree,
    alpha: f64,
    epsilon_scale: f64,
}

impl ImportanceMemory {
    /// All-ones prior.
    pub fn new(n: usize, alpha: f64, epsilon_scale: f64) -> Result<Self> {
        Self::from_values(vec![1.0; n], alpha, epsilon_scale)
    }

    pub fn from_values(q: Vec<f64>, alpha: f64, epsilon_scale: f64) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::contract("importance memory needs at least one sample"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("alpha must lie in [0,1], got {alpha}")));
        }
        if !(epsilon_scale >= 0.0 && epsilon_scale.is_finite()) {
            return Err(Error::contract(format!("epsilon scale must be >= 0, got {epsilon_scale}")));
        }
        if let Some(bad) = q.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::contract(format!("importance values must be finite and >= 0, got {bad}")));
        }
        let tree = FenwickTree::from_values(&q);
        Ok(Self {
            q,
            tree,
            alpha,
            epsilon_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn get(&self, i: usize) -> f64 {
        self.q[i]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon_scale(&self) -> f64 {
        self.epsilon_scale
    }

    pub fn total(&self) -> f64 {
        self.tree.total()
    }

    pub fn tree(&self) -> &FenwickTree {
        &self.tree
    }

    fn check_importance(value: f64) -> Result<()> {
        if value >= 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(Error::contract(format!("importance must be finite and >= 0, got {value}")))
        }
    }

    /// Direct assignment without EMA (initialization epoch).
    pub fn set(&mut self, index: usize, value: f64) -> Result<()> {
        Self::check_importance(value)?;
        let old = self.q[index];
        self.q[index] = value;
        self.tree.add(index, value - old);
        Ok(())
    }

    /// `q_i ← α·q_i + (1 − α)·new`
    pub fn ema_update(&mut self, index: usize, new_importance: f64) -> Result<()> {
        Self::check_importance(new_importance)?;
        let value = self.alpha * self.q[index] + (1.0 - self.alpha) * new_importance;
        self.set(index, value)
    }

    /// Adds `ε = epsilon_scale · mean(q)` to every entry and rebuilds the
    /// tree, which also discards accumulated rounding drift. Returns `ε`.
    pub fn epoch_floor(&mut self) -> f64 {
        let sum: f64 = self.q.iter().sum();
        let eps = self.epsilon_scale * sum / self.q.len() as f64;
        if eps > 0.0 {
            for v in &mut self.q {
                *v += eps;
            }
        }
        self.tree = FenwickTree::from_values(&self.q);
        eps
    }

    fn degenerate(&self) -> bool {
        let total = self.total();
        !(total > 0.0 && total.is_finite())
    }

    /// `p_i = q_i / Σq`, or uniform when `Σq = 0`.
    pub fn to_pdf(&self) -> Pdf {
        let n = self.q.len();
        let sum: f64 = self.q.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            log::warn!("importance memory sums to {sum}; falling back to a uniform pdf");
            return Pdf {
                p: vec![1.0 / n as f64; n],
                fallback: true,
            };
        }
        Pdf {
            p: self.q.iter().map(|v| v / sum).collect(),
            fallback: false,
        }
    }

    /// Probability of index `i` under the current memory.
    pub fn probability(&self, i: usize) -> f64 {
        if self.degenerate() {
            1.0 / self.q.len() as f64
        } else {
            self.q[i] / self.total()
        }
    }

    /// Inverse-CDF lookup for a uniform variate `u ∈ [0,1)`.
    pub fn sample_index(&self, u: f64) -> usize {
        let n = self.q.len();
        if self.degenerate() {
            return ((u * n as f64) as usize).min(n - 1);
        }
        let idx = self.tree.search(u * self.total());
        if idx < n {
            idx
        } else {
            // rounding pushed the target past the last boundary
            self.q.iter().rposition(|&v| v > 0.0).unwrap_or(n - 1)
        }
    }

    /// Draws `b` indices i.i.d. with replacement.
    ///
    /// Uniform mode ignores `q` and draws uniformly. The weighted modes draw
    /// ∝ `q` and attach `w = 1/p` (importance) or `w = N` (adaptive).
    pub fn sample_batch(&self, b: usize, rng: &mut Rng, mode: SamplingMode) -> Result<MiniBatch> {
        if b == 0 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        let n = self.q.len();
        let nf = n as f64;
        let mut batch = MiniBatch {
            indices: Vec::with_capacity(b),
            probs: Vec::with_capacity(b),
            weights: Vec::with_capacity(b),
            fallback: false,
        };
        if mode == SamplingMode::Uniform {
            for _ in 0..b {
                batch.indices.push(rng.below(n));
                batch.probs.push(1.0 / nf);
                batch.weights.push(nf);
            }
            return Ok(batch);
        }
        let degenerate = self.degenerate();
        if degenerate {
            log::warn!("importance memory sum is zero; sampling uniformly");
            batch.fallback = true;
        }
        let total = self.total();
        for _ in 0..b {
            let i = self.sample_index(rng.uniform_f64());
            let p = if degenerate { 1.0 / nf } else { self.q[i] / total };
            let w = match mode {
                SamplingMode::ImportanceSampling => 1.0 / p,
                _ => nf,
            };
            batch.indices.push(i);
            batch.probs.push(p);
            batch.weights.push(w);
        }
        Ok(batch)
    }

    /// Verifies the memory and pdf invariants; `O(N log N)`.
    pub fn check_invariants(&self) -> Result<()> {
        let mut run = 0.0;
        for (i, &v) in self.q.iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("q[{i}] = {v}")));
            }
            run += v;
            let tree = self.tree.prefix_sum(i + 1);
            if (tree - run).abs() > 1e-9 * run.max(1.0) {
                return Err(Error::contract(format!(
                    "prefix sum {i}: tree {tree} vs running {run}"
                )));
            }
        }
        self.to_pdf().check(&self.q)
    }

    /// CSV `index,q` with a header row.
    pub fn write_snapshot_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,q")?;
        for (i, v) in self.q.iter().enumerate() {
            writeln!(w, "{i},{v:e}")?;
        }
        Ok(())
    }
}

/// Linear-scan inverse CDF over `q`: smallest `k` with `Σ_{j≤k} q_j > u·Σq`.
/// Independent oracle for the tree search.
pub fn linear_scan_index(q: &[f64], u: f64) -> usize {
    let total: f64 = q.iter().sum();
    let target = u * total;
    let mut run = 0.0;
    for (k, &v) in q.iter().enumerate() {
        run += v;
        if run > target {
            return k;
        }
    }
    q.iter().rposition(|&v| v > 0.0).unwrap_or(q.len() - 1)
}

/// Draws one variate and checks the tree sampler against the linear scan.
pub fn fenwick_sample_equivalence_check(memory: &ImportanceMemory, rng: &mut Rng) -> Result<usize> {
    let u = rng.uniform_f64();
    let tree = memory.sample_index(u);
    let scan = linear_scan_index(memory.values(), u);
    if tree != scan {
        return Err(Error::contract(format!(
            "sampler mismatch at u = {u}: tree {tree}, scan {scan}"
        )));
    }
    Ok(tree)
}
