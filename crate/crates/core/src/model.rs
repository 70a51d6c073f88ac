//! Multilayer perceptron with ReLU or sine hidden activations, a linear output
//! layer, and either softmax cross-entropy or squared-error loss.
//!
//! # Parameter layout
//!
//! All parameters live in one flat vector. Layers are stored in order from
//! input to output; each layer contributes its weight matrix (row-major,
//! `fan_out × fan_in`) immediately followed by its bias vector (`fan_out`).
//! Gradients, optimizer state and checkpoints share this layout.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, l2_norm, log_sum_exp, softmax_into, DenseMatrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// `sin(omega0 · x)`
    Sine { omega0: f64 },
}

impl Activation {
    /// `out[i] = act(pre[i])`
    #[inline]
    fn apply_slice(self, pre: &[f64], out: &mut [f64]) {
        assert_eq!(pre.len(), out.len());
        match self {
            Activation::Relu => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = p.max(0.0);
                }
            }
            Activation::Sine { omega0 } => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = (omega0 * p).sin();
                }
            }
        }
    }

    /// `delta[i] *= act'(pre[i])`
    #[inline]
    fn mul_derivative_slice(self, pre: &[f64], delta: &mut [f64]) {
        assert_eq!(pre.len(), delta.len());
        match self {
            Activation::Relu => {
                for (d, &p) in delta.iter_mut().zip(pre) {
                    *d *= if p > 0.0 { 1.0 } else { 0.0 };
                }
            }
            Activation::Sine { omega0 } => {
                for (d, &p) in delta.iter_mut().zip(pre) {
                    *d *= omega0 * (omega0 * p).cos();
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// Unreduced sum of squares over output components.
    SquaredError,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(Vec<f64>),
}

mod batch;

pub use batch::BatchWorkspace;

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    loss_kind: LossKind,
    params: Vec<f64>,
    slots: Vec<LayerSlot>,
}

/// Everything a forward pass produced that backward and the importance
/// functions need.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activations per layer; the last entry holds the logits `z`.
    pub pre: Vec<Vec<f64>>,
    /// Hidden activations, one per hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub loss_kind: Option<LossKind>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Input activation to layer `k`.
    fn layer_input(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.input
        } else {
            &self.hidden[k - 1]
        }
    }
}

/// Reusable buffers for the allocation-free per-sample hot path.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    pub trace: ForwardTrace,
    deltas: Vec<Vec<f64>>,
    nonzero: Vec<usize>,
    out_grad: Vec<f64>,
}

impl Workspace {
    pub fn new(model: &MlpModel) -> Self {
        let n = model.num_layers();
        Self {
            trace: ForwardTrace {
                input: vec![0.0; model.dims[0]],
                pre: (0..n).map(|k| vec![0.0; model.dims[k + 1]]).collect(),
                hidden: (0..n - 1).map(|k| vec![0.0; model.dims[k + 1]]).collect(),
                loss_kind: Some(model.loss_kind),
            },
            deltas: (0..n).map(|k| vec![0.0; model.dims[k + 1]]).collect(),
            nonzero: Vec::with_capacity(model.dims.iter().copied().max().unwrap_or(0)),
            out_grad: vec![0.0; model.output_dim()],
        }
    }

    pub fn output_gradient(&self) -> &[f64] {
        &self.out_grad
    }
}

/// Inputs with at most this fraction of nonzeros take the sparse path.
const SPARSE_DENSITY: f64 = 0.5;

fn collect_nonzero(v: &[f64], out: &mut Vec<usize>) -> bool {
    out.clear();
    out.extend(v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, _)| i));
    (out.len() as f64) <= SPARSE_DENSITY * v.len() as f64
}

impl MlpModel {
    /// Zero-initialized model.
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>, loss_kind: LossKind) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::contract("a model needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("layer dims must be positive"));
        }
        if activations.len() != dims.len() - 2 {
            return Err(Error::contract(format!(
                "{} activations given for {} hidden layers",
                activations.len(),
                dims.len() - 2
            )));
        }
        let n = Self::param_count_for(&dims);
        let mut offset = 0;
        let slots = dims
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect();
        Ok(Self {
            dims,
            activations,
            loss_kind,
            params: vec![0.0; n],
            slots,
        })
    }

    /// Randomly initialized model.
    ///
    /// Sine layers follow the SIREN scheme: the first layer draws weights from
    /// `U(-1/n, 1/n)`, later layers from `U(-√(6/n)/ω₀, √(6/n)/ω₀)`, biases
    /// from `U(-1/√n, 1/√n)`. Layers feeding from ReLU (or raw input into a
    /// ReLU layer) use He-uniform weights and zero biases. The linear output
    /// layer after ReLU uses LeCun-uniform weights.
    pub fn init(
        dims: Vec<usize>,
        activations: Vec<Activation>,
        loss_kind: LossKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut model = Self::new(dims, activations, loss_kind)?;
        let slots = model.slots.clone();
        let n_layers = slots.len();
        for (k, slot) in slots.iter().enumerate() {
            let n = slot.fan_in as f64;
            // the activation applied after this layer (None for the output)
            let this_act = model.activations.get(k).copied();
            let prev_act = if k == 0 { None } else { Some(model.activations[k - 1]) };
            let siren = matches!(this_act, Some(Activation::Sine { .. }))
                || matches!(prev_act, Some(Activation::Sine { .. }));
            let (w_bound, b_bound) = if siren {
                let omega0 = match (this_act, prev_act) {
                    (_, Some(Activation::Sine { omega0 })) => omega0,
                    (Some(Activation::Sine { omega0 }), _) => omega0,
                    _ => unreachable!(),
                };
                let w = if k == 0 { 1.0 / n } else { (6.0 / n).sqrt() / omega0 };
                (w, 1.0 / n.sqrt())
            } else if k + 1 == n_layers && n_layers > 1 {
                ((3.0 / n).sqrt(), 0.0)
            } else {
                ((6.0 / n).sqrt(), 0.0)
            };
            for w in &mut model.params[slot.weights..slot.weights + slot.fan_in * slot.fan_out] {
                *w = (2.0 * rng.uniform_f64() - 1.0) * w_bound;
            }
            for b in &mut model.params[slot.biases..slot.biases + slot.fan_out] {
                *b = (2.0 * rng.uniform_f64() - 1.0) * b_bound;
            }
        }
        Ok(model)
    }

    pub fn param_count_for(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, model needs {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Offsets of (weights, biases) for layer `k` in the flat vector.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize) {
        let s = self.slots()[k];
        (s.weights, s.biases)
    }

    fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(Error::contract(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    pub fn check_target(&self, target: &Target) -> Result<()> {
        match (self.loss_kind, target) {
            (LossKind::SoftmaxCrossEntropy, Target::Class(c)) if *c < self.output_dim() => Ok(()),
            (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => Err(Error::contract(format!(
                "class index {c} out of range for {} outputs",
                self.output_dim()
            ))),
            (LossKind::SquaredError, Target::Value(v)) if v.len() == self.output_dim() => Ok(()),
            (LossKind::SquaredError, Target::Value(v)) => Err(Error::contract(format!(
                "regression target has {} values, model outputs {}",
                v.len(),
                self.output_dim()
            ))),
            _ => Err(Error::contract("target kind does not match the model's loss")),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        self.forward_into(x, &mut ws);
        Ok(ws.trace)
    }

    /// Forward pass into preallocated buffers. Panics on shape mismatch.
    pub fn forward_into(&self, x: &[f64], ws: &mut Workspace) {
        assert_eq!(x.len(), self.dims[0], "input dimension mismatch");
        let slots = self.slots();
        let trace = &mut ws.trace;
        trace.input.clear();
        trace.input.extend_from_slice(x);
        let sparse_input = collect_nonzero(x, &mut ws.nonzero);
        for (k, slot) in slots.iter().enumerate() {
            let w = &self.params[slot.weights..slot.biases];
            let b = &self.params[slot.biases..slot.biases + slot.fan_out];
            let out = &mut trace.pre[k];
            let input: &[f64] = if k == 0 { &trace.input } else { &trace.hidden[k - 1] };
            if k == 0 && sparse_input {
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &w[i * slot.fan_in..(i + 1) * slot.fan_in];
                    let mut acc = 0.0;
                    for &j in &ws.nonzero {
                        acc += row[j] * input[j];
                    }
                    *o = acc + b[i];
                }
            } else {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(&w[i * slot.fan_in..(i + 1) * slot.fan_in], input) + b[i];
                }
            }
            if k + 1 < slots.len() {
                self.activations[k].apply_slice(&trace.pre[k], &mut trace.hidden[k]);
            }
        }
        trace.loss_kind = Some(self.loss_kind);
    }

    /// Loss of a completed trace against a target.
    pub fn loss(&self, trace: &ForwardTrace, target: &Target) -> Result<f64> {
        self.check_target(target)?;
        Ok(loss_of(self.loss_kind, trace.logits(), target))
    }

    /// Loss gradient with respect to the logits: `s − t` for cross-entropy
    /// (softmax fused), `2(z − y)` for squared error.
    pub fn output_layer_loss_gradient(&self, trace: &ForwardTrace, target: &Target) -> Result<Vec<f64>> {
        self.check_target(target)?;
        let mut g = vec![0.0; self.output_dim()];
        output_gradient_into(self.loss_kind, trace.logits(), target, &mut g);
        Ok(g)
    }

    /// Reverse pass from a given output gradient. Adds `scale · ∂L/∂θ` into
    /// `grad`, which must be aligned with the parameter vector. The trace in
    /// `ws` must come from [`Self::forward_into`] on this model.
    pub fn accumulate_backward(&self, ws: &mut Workspace, out_grad: &[f64], scale: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer misaligned");
        let slots = self.slots();
        let last = slots.len() - 1;
        ws.deltas[last].copy_from_slice(out_grad);
        for k in (0..slots.len()).rev() {
            let slot = slots[k];
            let input = ws.trace.layer_input(k);
            let delta = &ws.deltas[k];
            let sparse = collect_nonzero(input, &mut ws.nonzero);
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let sd = scale * d;
                let row = &mut grad[slot.weights + i * slot.fan_in..slot.weights + (i + 1) * slot.fan_in];
                if sparse {
                    for &j in &ws.nonzero {
                        row[j] += sd * input[j];
                    }
                } else {
                    axpy(sd, input, row);
                }
                grad[slot.biases + i] += sd;
            }
            if k > 0 {
                let (lower, upper) = ws.deltas.split_at_mut(k);
                let prev = &mut lower[k - 1];
                let delta = &upper[0];
                prev.iter_mut().for_each(|v| *v = 0.0);
                let w = &self.params[slot.weights..slot.biases];
                for (i, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &w[i * slot.fan_in..(i + 1) * slot.fan_in], prev);
                    }
                }
                self.activations[k - 1].mul_derivative_slice(&ws.trace.pre[k - 1], prev);
            }
        }
    }

    /// Forward plus backward for one sample, accumulating `scale · ∇θ ℓ` into
    /// `grad`. Returns the loss. Leaves the trace and the output gradient in `ws`.
    pub fn accumulate_sample(
        &self,
        x: &[f64],
        target: &Target,
        scale: f64,
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> f64 {
        self.forward_into(x, ws);
        let z = ws.trace.logits();
        let loss = loss_of(self.loss_kind, z, target);
        let mut out = std::mem::take(&mut ws.out_grad);
        output_gradient_into(self.loss_kind, ws.trace.logits(), target, &mut out);
        self.accumulate_backward(ws, &out, scale, grad);
        ws.out_grad = out;
        loss
    }

    /// Exact per-sample loss and full parameter gradient.
    pub fn backward_per_sample(&self, x: &[f64], target: &Target) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        self.check_target(target)?;
        let mut ws = Workspace::new(self);
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_sample(x, target, 1.0, &mut grad, &mut ws);
        Ok((loss, grad))
    }

    pub fn per_sample_gradient_norm(&self, x: &[f64], target: &Target) -> Result<f64> {
        let (_, g) = self.backward_per_sample(x, target)?;
        Ok(l2_norm(&g))
    }

    /// Loss as a function of an explicit parameter vector; finite-difference helper.
    pub fn loss_at(&self, params: &[f64], x: &[f64], target: &Target) -> Result<f64> {
        let mut probe = self.clone();
        probe.set_params(params)?;
        let trace = probe.forward(x)?;
        probe.loss(&trace, target)
    }

    /// Predicted class with the lowest index winning ties.
    pub fn predict_class(logits: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Largest parameter count accepted by [`jacobian_output_wrt_params`].
pub const JACOBIAN_MAX_PARAMS: usize = 10_000;

/// Central finite-difference Jacobian of the logits with respect to the
/// parameters, `J × |θ|`. Intended for small models in tests.
pub fn jacobian_output_wrt_params(model: &MlpModel, x: &[f64]) -> Result<DenseMatrix> {
    let n = model.params().len();
    if n > JACOBIAN_MAX_PARAMS {
        return Err(Error::contract(format!(
            "jacobian requested for {n} parameters, limit is {JACOBIAN_MAX_PARAMS}"
        )));
    }
    model.check_input(x)?;
    let h = 1e-6;
    let out = model.output_dim();
    let mut jac = DenseMatrix::zeros(out, n);
    let mut probe = model.clone();
    let mut ws = Workspace::new(model);
    for i in 0..n {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        probe.forward_into(x, &mut ws);
        let up = ws.trace.logits().to_vec();
        probe.params[i] = orig - h;
        probe.forward_into(x, &mut ws);
        let down = ws.trace.logits();
        for r in 0..out {
            jac.set(r, i, (up[r] - down[r]) / (2.0 * h));
        }
        probe.params[i] = orig;
    }
    Ok(jac)
}

pub(crate) fn loss_of(kind: LossKind, z: &[f64], target: &Target) -> f64 {
    match (kind, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => log_sum_exp(z) - z[*c],
        (LossKind::SquaredError, Target::Value(y)) => {
            z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
        }
        _ => panic!("target kind does not match loss kind"),
    }
}

pub(crate) fn output_gradient_into(kind: LossKind, z: &[f64], target: &Target, out: &mut [f64]) {
    match (kind, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            softmax_into(z, out);
            out[*c] -= 1.0;
        }
        (LossKind::SquaredError, Target::Value(y)) => {
            for ((o, a), b) in out.iter_mut().zip(z).zip(y) {
                *o = 2.0 * (a - b);
            }
        }
        _ => panic!("target kind does not match loss kind"),
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ISGDCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (all little-endian):
///
/// ```text
/// magic "ISGDCKPT" | version u32 | n_dims u32 | dims u32 × n_dims
/// | per hidden layer: tag u8 (0 relu, 1 sine) + omega0 f64 (sine only)
/// | loss tag u8 (0 cross-entropy, 1 squared error)
/// | n_params u64 | params f64 × n_params
/// ```
pub fn write_checkpoint<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.dims.len() as u32).to_le_bytes())?;
    for &d in &model.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for act in &model.activations {
        match act {
            Activation::Relu => w.write_all(&[0])?,
            Activation::Sine { omega0 } => {
                w.write_all(&[1])?;
                w.write_all(&omega0.to_le_bytes())?;
            }
        }
    }
    w.write_all(&[match model.loss_kind {
        LossKind::SoftmaxCrossEntropy => 0,
        LossKind::SquaredError => 1,
    }])?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<MlpModel> {
    fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }
    if &take::<8, _>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_dims = u32::from_le_bytes(take(&mut r)?) as usize;
    if !(2..=1024).contains(&n_dims) {
        return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
    }
    let dims = (0..n_dims)
        .map(|_| Ok(u32::from_le_bytes(take(&mut r)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut activations = Vec::with_capacity(n_dims - 2);
    for _ in 0..n_dims - 2 {
        activations.push(match take::<1, _>(&mut r)?[0] {
            0 => Activation::Relu,
            1 => Activation::Sine {
                omega0: f64::from_le_bytes(take(&mut r)?),
            },
            t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        });
    }
    let loss_kind = match take::<1, _>(&mut r)?[0] {
        0 => LossKind::SoftmaxCrossEntropy,
        1 => LossKind::SquaredError,
        t => return Err(Error::Checkpoint(format!("unknown loss tag {t}"))),
    };
    let mut model = MlpModel::new(dims, activations, loss_kind)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = u64::from_le_bytes(take(&mut r)?) as usize;
    if n != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n} parameters, layout needs {}",
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        *p = f64::from_le_bytes(take(&mut r)?);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
