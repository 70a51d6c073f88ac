//! Batched forward/backward over a mini-batch.
//!
//! Samples are processed in tiles of four against pairs of weight rows, so
//! each row loaded serves four dot products, delta updates or gradient
//! contributions. Forward dot products use the same lane split as
//! [`crate::numerics::dot`], so batched logits equal per-sample logits bit
//! for bit on the dense path.

use super::{collect_nonzero, loss_of, output_gradient_into, MlpModel, Target};

const TILE: usize = 4;
/// Weight rows handled together by one tile.
const ROWS: usize = 2;

/// Reusable buffers for [`MlpModel::accumulate_batch`] and
/// [`MlpModel::forward_batch`]. All matrices are row-major, one row per sample.
#[derive(Clone, Debug, Default)]
pub struct BatchWorkspace {
    rows: usize,
    /// Pre-activations per layer (`rows × fan_out`); the last holds the logits.
    pre: Vec<Vec<f64>>,
    /// Hidden activations per hidden layer.
    act: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    out_grad: Vec<f64>,
    losses: Vec<f64>,
    nonzero: Vec<Vec<usize>>,
    dims: Vec<usize>,
}

impl BatchWorkspace {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            dims: model.dims.clone(),
            ..Self::default()
        }
    }

    fn resize(&mut self, model: &MlpModel, rows: usize) {
        if self.dims != model.dims {
            *self = Self::new(model);
        }
        self.rows = rows;
        let n = model.num_layers();
        self.pre.resize_with(n, Vec::new);
        self.deltas.resize_with(n, Vec::new);
        self.act.resize_with(n - 1, Vec::new);
        for k in 0..n {
            self.pre[k].resize(rows * model.dims[k + 1], 0.0);
            self.deltas[k].resize(rows * model.dims[k + 1], 0.0);
        }
        for k in 0..n - 1 {
            self.act[k].resize(rows * model.dims[k + 1], 0.0);
        }
        self.out_grad.resize(rows * model.output_dim(), 0.0);
        self.losses.resize(rows, 0.0);
        self.nonzero.resize_with(rows, Vec::new);
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn logits(&self, s: usize) -> &[f64] {
        let out = *self.dims.last().unwrap();
        &self.pre.last().unwrap()[s * out..(s + 1) * out]
    }

    /// Unscaled loss gradient at the logits of sample `s`.
    pub fn output_gradient(&self, s: usize) -> &[f64] {
        let out = *self.dims.last().unwrap();
        &self.out_grad[s * out..(s + 1) * out]
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses[..self.rows]
    }
}

/// Four f64 lanes. Every implementation does lane-wise IEEE multiply and add
/// with no fusing, so all of them give bit-identical results.
trait Lanes: Copy {
    fn zero() -> Self;
    fn splat(x: f64) -> Self;
    fn load(p: &[f64; 4]) -> Self;
    fn store(self, p: &mut [f64; 4]);
    fn add(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
}

impl Lanes for [f64; 4] {
    #[inline(always)]
    fn zero() -> Self {
        [0.0; 4]
    }
    #[inline(always)]
    fn splat(x: f64) -> Self {
        [x; 4]
    }
    #[inline(always)]
    fn load(p: &[f64; 4]) -> Self {
        *p
    }
    #[inline(always)]
    fn store(self, p: &mut [f64; 4]) {
        *p = self;
    }
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        std::array::from_fn(|l| self[l] + o[l])
    }
    #[inline(always)]
    fn mul(self, o: Self) -> Self {
        std::array::from_fn(|l| self[l] * o[l])
    }
}

/// AVX register. Only instantiated inside the `*_avx2` entry points, which
/// run after a runtime feature check.
#[cfg(target_arch = "x86_64")]
#[derive(Clone, Copy)]
struct Avx(std::arch::x86_64::__m256d);

#[cfg(target_arch = "x86_64")]
impl Lanes for Avx {
    #[inline(always)]
    fn zero() -> Self {
        // SAFETY (all methods): see the type's doc comment.
        unsafe { Avx(std::arch::x86_64::_mm256_setzero_pd()) }
    }
    #[inline(always)]
    fn splat(x: f64) -> Self {
        unsafe { Avx(std::arch::x86_64::_mm256_set1_pd(x)) }
    }
    #[inline(always)]
    fn load(p: &[f64; 4]) -> Self {
        unsafe { Avx(std::arch::x86_64::_mm256_loadu_pd(p.as_ptr())) }
    }
    #[inline(always)]
    fn store(self, p: &mut [f64; 4]) {
        unsafe { std::arch::x86_64::_mm256_storeu_pd(p.as_mut_ptr(), self.0) }
    }
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        unsafe { Avx(std::arch::x86_64::_mm256_add_pd(self.0, o.0)) }
    }
    #[inline(always)]
    fn mul(self, o: Self) -> Self {
        unsafe { Avx(std::arch::x86_64::_mm256_mul_pd(self.0, o.0)) }
    }
}

#[inline(always)]
fn quad(v: &[f64], c: usize) -> &[f64; 4] {
    v[c * 4..c * 4 + 4].try_into().unwrap()
}

#[inline(always)]
fn quad_mut(v: &mut [f64], c: usize) -> &mut [f64; 4] {
    (&mut v[c * 4..c * 4 + 4]).try_into().unwrap()
}

/// Dot products of `R` weight rows with `T` inputs; `out[r][t] = w[r] · a[t]`.
#[inline(always)]
fn dot_tile<V: Lanes, const R: usize, const T: usize>(w: [&[f64]; R], a: [&[f64]; T]) -> [[f64; T]; R] {
    let n = w[0].len();
    let split = n - n % 4;
    let w: [&[f64]; R] = std::array::from_fn(|r| &w[r][..n]);
    let a: [&[f64]; T] = std::array::from_fn(|t| &a[t][..n]);
    let mut acc = [[V::zero(); T]; R];
    for c in 0..split / 4 {
        let aj: [V; T] = std::array::from_fn(|t| V::load(quad(a[t], c)));
        for r in 0..R {
            let wj = V::load(quad(w[r], c));
            for t in 0..T {
                acc[r][t] = acc[r][t].add(wj.mul(aj[t]));
            }
        }
    }
    let mut out = [[0.0; T]; R];
    for r in 0..R {
        for t in 0..T {
            let mut tail = 0.0;
            for j in split..n {
                tail += w[r][j] * a[t][j];
            }
            let mut q = [0.0; 4];
            acc[r][t].store(&mut q);
            out[r][t] = (q[0] + q[1]) + (q[2] + q[3]) + tail;
        }
    }
    out
}

/// `outs[t] += Σ_r coeffs[r][t] · w[r]`, adding the rows in order.
#[inline(always)]
fn axpy_tile<V: Lanes, const R: usize, const T: usize>(
    w: [&[f64]; R],
    coeffs: [[f64; T]; R],
    outs: [&mut [f64]; T],
) {
    let n = w[0].len();
    let w: [&[f64]; R] = std::array::from_fn(|r| &w[r][..n]);
    let outs = outs.map(|o| &mut o[..n]);
    let cv: [[V; T]; R] = coeffs.map(|c| c.map(V::splat));
    let split = n - n % 4;
    for c in 0..split / 4 {
        let wj: [V; R] = std::array::from_fn(|r| V::load(quad(w[r], c)));
        for t in 0..T {
            let o = quad_mut(outs[t], c);
            let mut v = V::load(o);
            for r in 0..R {
                v = v.add(cv[r][t].mul(wj[r]));
            }
            v.store(o);
        }
    }
    for j in split..n {
        for t in 0..T {
            let mut v = outs[t][j];
            for r in 0..R {
                v += coeffs[r][t] * w[r][j];
            }
            outs[t][j] = v;
        }
    }
}

/// `rows[r] += Σ_t coeffs[r][t] · ins[t]`, adding the samples in order.
#[inline(always)]
fn gather_tile<V: Lanes, const R: usize, const T: usize>(
    rows: [&mut [f64]; R],
    coeffs: [[f64; T]; R],
    ins: [&[f64]; T],
) {
    let n = rows[0].len();
    let rows = rows.map(|r| &mut r[..n]);
    let ins: [&[f64]; T] = std::array::from_fn(|t| &ins[t][..n]);
    let cv: [[V; T]; R] = coeffs.map(|c| c.map(V::splat));
    let split = n - n % 4;
    for c in 0..split / 4 {
        let x: [V; T] = std::array::from_fn(|t| V::load(quad(ins[t], c)));
        for r in 0..R {
            let o = quad_mut(rows[r], c);
            let mut v = V::load(o);
            for t in 0..T {
                v = v.add(cv[r][t].mul(x[t]));
            }
            v.store(o);
        }
    }
    for j in split..n {
        for r in 0..R {
            let mut v = rows[r][j];
            for t in 0..T {
                v += coeffs[r][t] * ins[t][j];
            }
            rows[r][j] = v;
        }
    }
}

#[inline(always)]
fn rows_of_mut(m: &mut [f64], width: usize, s0: usize) -> [&mut [f64]; TILE] {
    let mut it = m[s0 * width..(s0 + TILE) * width].chunks_exact_mut(width);
    std::array::from_fn(|_| it.next().unwrap())
}

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    use std::sync::OnceLock;
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| is_x86_feature_detected!("avx2"))
}

impl MlpModel {
    fn forward_batch_inner(&self, xs: &[&[f64]], bws: &mut BatchWorkspace) -> bool {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2, checked at runtime.
            return unsafe { self.forward_batch_avx2(xs, bws) };
        }
        self.forward_batch_body::<[f64; 4]>(xs, bws)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn forward_batch_avx2(&self, xs: &[&[f64]], bws: &mut BatchWorkspace) -> bool {
        self.forward_batch_body::<Avx>(xs, bws)
    }

    #[inline(always)]
    fn forward_batch_body<V: Lanes>(&self, xs: &[&[f64]], bws: &mut BatchWorkspace) -> bool {
        let rows = xs.len();
        bws.resize(self, rows);
        for x in xs {
            assert_eq!(x.len(), self.dims[0], "input dimension mismatch");
        }
        let mut sparse = true;
        for (s, x) in xs.iter().enumerate() {
            sparse &= collect_nonzero(x, &mut bws.nonzero[s]);
        }
        let n_layers = self.num_layers();
        for (k, slot) in self.slots.iter().enumerate() {
            let w = &self.params[slot.weights..slot.biases];
            let b = &self.params[slot.biases..slot.biases + slot.fan_out];
            let (fi, fo) = (slot.fan_in, slot.fan_out);
            let (act_lo, act_hi) = bws.act.split_at_mut(k.min(n_layers - 1));
            let input = |s: usize| -> &[f64] {
                if k == 0 {
                    xs[s]
                } else {
                    &act_lo[k - 1][s * fi..(s + 1) * fi]
                }
            };
            let pre = &mut bws.pre[k];
            if k == 0 && sparse {
                for s in 0..rows {
                    let x = xs[s];
                    let nz = &bws.nonzero[s];
                    for i in 0..fo {
                        let row = &w[i * fi..(i + 1) * fi];
                        let mut acc = 0.0;
                        for &j in nz {
                            acc += row[j] * x[j];
                        }
                        pre[s * fo + i] = acc + b[i];
                    }
                }
            } else {
                let wrow = |i: usize| &w[i * fi..(i + 1) * fi];
                let full = rows - rows % TILE;
                let fo_full = fo - fo % ROWS;
                for s0 in (0..full).step_by(TILE) {
                    let ins: [&[f64]; TILE] = std::array::from_fn(|t| input(s0 + t));
                    for i0 in (0..fo_full).step_by(ROWS) {
                        let d = dot_tile::<V, _, _>(std::array::from_fn::<_, ROWS, _>(|r| wrow(i0 + r)), ins);
                        for r in 0..ROWS {
                            for t in 0..TILE {
                                pre[(s0 + t) * fo + i0 + r] = d[r][t] + b[i0 + r];
                            }
                        }
                    }
                    for i in fo_full..fo {
                        let d = dot_tile::<V, _, _>([wrow(i)], ins);
                        for t in 0..TILE {
                            pre[(s0 + t) * fo + i] = d[0][t] + b[i];
                        }
                    }
                }
                for s in full..rows {
                    let x = input(s);
                    for i in 0..fo {
                        pre[s * fo + i] = dot_tile::<V, _, _>([wrow(i)], [x])[0][0] + b[i];
                    }
                }
            }
            if k + 1 < n_layers {
                self.activations[k].apply_slice(pre, &mut act_hi[0]);
            }
        }
        sparse
    }

    /// Batched forward pass; read the logits with [`BatchWorkspace::logits`].
    pub fn forward_batch(&self, xs: &[&[f64]], bws: &mut BatchWorkspace) {
        self.forward_batch_inner(xs, bws);
    }

    /// Adds `Σ_s scales[s] · ∇θ ℓ_s` into `grad`. Per-sample losses and
    /// unscaled output gradients are left in `bws`. Panics on shape mismatch.
    pub fn accumulate_batch(
        &self,
        xs: &[&[f64]],
        targets: &[&Target],
        scales: &[f64],
        grad: &mut [f64],
        bws: &mut BatchWorkspace,
    ) {
        assert_eq!(xs.len(), targets.len(), "one target per input");
        assert_eq!(xs.len(), scales.len(), "one scale per input");
        assert_eq!(grad.len(), self.params.len(), "gradient buffer misaligned");
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2, checked at runtime.
            return unsafe { self.accumulate_batch_avx2(xs, targets, scales, grad, bws) };
        }
        self.accumulate_batch_body::<[f64; 4]>(xs, targets, scales, grad, bws)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_batch_avx2(
        &self,
        xs: &[&[f64]],
        targets: &[&Target],
        scales: &[f64],
        grad: &mut [f64],
        bws: &mut BatchWorkspace,
    ) {
        self.accumulate_batch_body::<Avx>(xs, targets, scales, grad, bws)
    }

    #[inline(always)]
    fn accumulate_batch_body<V: Lanes>(
        &self,
        xs: &[&[f64]],
        targets: &[&Target],
        scales: &[f64],
        grad: &mut [f64],
        bws: &mut BatchWorkspace,
    ) {
        let rows = xs.len();
        let sparse = self.forward_batch_body::<V>(xs, bws);
        let n_layers = self.num_layers();
        let out = self.output_dim();
        let last = n_layers - 1;
        for s in 0..rows {
            let z = &bws.pre[last][s * out..(s + 1) * out];
            bws.losses[s] = loss_of(self.loss_kind, z, targets[s]);
            let g = &mut bws.out_grad[s * out..(s + 1) * out];
            output_gradient_into(self.loss_kind, z, targets[s], g);
            for (d, &gi) in bws.deltas[last][s * out..(s + 1) * out].iter_mut().zip(g.iter()) {
                *d = scales[s] * gi;
            }
        }
        let full = rows - rows % TILE;
        for k in (0..n_layers).rev() {
            let slot = self.slots[k];
            let (fi, fo) = (slot.fan_in, slot.fan_out);
            let (d_lo, d_hi) = bws.deltas.split_at_mut(k);
            let delta = &d_hi[0];
            let input = |s: usize| -> &[f64] {
                if k == 0 {
                    xs[s]
                } else {
                    &bws.act[k - 1][s * fi..(s + 1) * fi]
                }
            };
            let fo_full = fo - fo % ROWS;
            // weight gradients
            let gw = &mut grad[slot.weights..slot.biases];
            if k == 0 && sparse {
                for (i, row) in gw.chunks_exact_mut(fi).enumerate() {
                    for s in 0..rows {
                        let d = delta[s * fo + i];
                        if d != 0.0 {
                            let x = xs[s];
                            for &j in &bws.nonzero[s] {
                                row[j] += d * x[j];
                            }
                        }
                    }
                }
            } else {
                let coeff = |i: usize, s0: usize| -> [f64; TILE] { std::array::from_fn(|t| delta[(s0 + t) * fo + i]) };
                for i0 in (0..fo).step_by(ROWS) {
                    let block = &mut gw[i0 * fi..(i0 + ROWS).min(fo) * fi];
                    if i0 < fo_full {
                        let mut it = block.chunks_exact_mut(fi);
                        let mut out: [&mut [f64]; ROWS] = std::array::from_fn(|_| it.next().unwrap());
                        for s0 in (0..full).step_by(TILE) {
                            let c: [[f64; TILE]; ROWS] = std::array::from_fn(|r| coeff(i0 + r, s0));
                            if c.iter().flatten().all(|&v| v == 0.0) {
                                continue;
                            }
                            gather_tile::<V, _, _>(out.each_mut().map(|r| &mut **r), c, std::array::from_fn(|t| input(s0 + t)));
                        }
                        for s in full..rows {
                            let c: [[f64; 1]; ROWS] = std::array::from_fn(|r| [delta[s * fo + i0 + r]]);
                            if c.iter().flatten().all(|&v| v == 0.0) {
                                continue;
                            }
                            gather_tile::<V, _, _>(out.each_mut().map(|r| &mut **r), c, [input(s)]);
                        }
                    } else {
                        for s0 in (0..full).step_by(TILE) {
                            let c = coeff(i0, s0);
                            if c.iter().all(|&v| v == 0.0) {
                                continue;
                            }
                            gather_tile::<V, _, _>([&mut *block], [c], std::array::from_fn(|t| input(s0 + t)));
                        }
                        for s in full..rows {
                            let d = delta[s * fo + i0];
                            if d != 0.0 {
                                gather_tile::<V, _, _>([&mut *block], [[d]], [input(s)]);
                            }
                        }
                    }
                }
            }
            // bias gradients
            for i in 0..fo {
                let mut gb = grad[slot.biases + i];
                for s in 0..rows {
                    gb += delta[s * fo + i];
                }
                grad[slot.biases + i] = gb;
            }
            if k == 0 {
                break;
            }
            // propagate to the previous layer
            let prev = &mut d_lo[k - 1];
            prev.iter_mut().for_each(|v| *v = 0.0);
            let w = &self.params[slot.weights..slot.biases];
            let wrow = |i: usize| &w[i * fi..(i + 1) * fi];
            for s0 in (0..full).step_by(TILE) {
                for i0 in (0..fo_full).step_by(ROWS) {
                    let c: [[f64; TILE]; ROWS] =
                        std::array::from_fn(|r| std::array::from_fn(|t| delta[(s0 + t) * fo + i0 + r]));
                    if c.iter().flatten().all(|&v| v == 0.0) {
                        continue;
                    }
                    axpy_tile::<V, _, _>(std::array::from_fn(|r| wrow(i0 + r)), c, rows_of_mut(prev, fi, s0));
                }
                for i in fo_full..fo {
                    let c: [f64; TILE] = std::array::from_fn(|t| delta[(s0 + t) * fo + i]);
                    if c.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    axpy_tile::<V, _, _>([wrow(i)], [c], rows_of_mut(prev, fi, s0));
                }
            }
            for s in full..rows {
                for i in 0..fo {
                    let d = delta[s * fo + i];
                    if d != 0.0 {
                        axpy_tile::<V, _, _>([wrow(i)], [[d]], [&mut prev[s * fi..(s + 1) * fi]]);
                    }
                }
            }
            self.activations[k - 1].mul_derivative_slice(&bws.pre[k - 1], prev);
        }
    }
}
