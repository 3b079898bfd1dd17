//! Convolutional relative-phase regressor.
//!
//! Three 3×3 conv blocks and one 2×1 block (conv → batch-norm → ReLU), a
//! flatten, and a dense layer with two linear outputs `(E1, E2)`. Input
//! records use the `[row][time][antenna]` layout produced by
//! [`pack_input`](crate::dataset::pack_input); internally activations are
//! stored channel-major (`[channel][batch][row][time]`) so every conv is a
//! single GEMM over the whole batch.
//!
//! The network is generic over [`Scalar`] so it can run in `f64` for
//! finite-difference checks and in `f32` for training.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::FromPrimitive;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{augment_with, LabeledRecord};
use crate::error::{Error, Result};
use crate::seed::sub_seed;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Floating-point type the network can run in.
pub trait Scalar:
    num_traits::Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    /// `C ← α·A·B + β·C` on strided matrices.
    ///
    /// # Safety
    /// Same contract as [`matrixmultiply::sgemm`].
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Row-major `C = op(A)·op(B) + beta·C` where `op(A)` is `m×k` and `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the assertion above keeps every strided access inside the slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A learnable tensor and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    value: Vec<T>,
    grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [T] {
        &mut self.value
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn uniform(n: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        Param::new((0..n).map(|_| cst(rng.random_range(-bound..bound))).collect())
    }
}

/// Layer shapes of a [`PhaseModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub antennas: usize,
    pub chunk_len: usize,
    /// Filter counts of the three 3×3 conv layers.
    pub widths: [usize; 3],
    /// Filter count of the 2×1 conv layer.
    pub combine_width: usize,
    /// Time-axis stride of each 3×3 conv layer.
    pub time_stride: usize,
    /// Scale each record to unit RMS before the first layer.
    pub normalize_input: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            antennas: crate::dataset::N_ANTENNAS,
            chunk_len: crate::phasecore::DEFAULT_CHUNK_LEN,
            widths: [16, 32, 64],
            combine_width: 64,
            time_stride: 2,
            normalize_input: true,
        }
    }
}

impl Architecture {
    fn validate(&self) -> Result<()> {
        if self.antennas == 0
            || self.chunk_len == 0
            || self.time_stride == 0
            || self.combine_width == 0
            || self.widths.contains(&0)
        {
            return Err(Error::Shape(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// Values per input record (`2·M·N`).
    pub fn input_len(&self) -> usize {
        2 * self.chunk_len * self.antennas
    }

    fn conv_specs(&self) -> [ConvSpec; 4] {
        let s = self.time_stride;
        let [w1, w2, w3] = self.widths;
        let k3 = |cin, cout| ConvSpec {
            cin,
            cout,
            kh: 3,
            kw: 3,
            ph: 1,
            pw: 1,
            sw: s,
        };
        [
            k3(self.antennas, w1),
            k3(w1, w2),
            k3(w2, w3),
            ConvSpec {
                cin: w3,
                cout: self.combine_width,
                kh: 2,
                kw: 1,
                ph: 0,
                pw: 0,
                sw: 1,
            },
        ]
    }

    /// Time-axis length after the conv stack.
    fn final_width(&self) -> usize {
        let mut w = self.chunk_len;
        for spec in self.conv_specs() {
            w = spec.out_dim(2, w).1;
        }
        w
    }

    fn flat_len(&self) -> usize {
        self.combine_width * self.final_width()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    sw: usize,
}

impl ConvSpec {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.ph - self.kh + 1, (w + 2 * self.pw - self.kw) / self.sw + 1)
    }
}

/// Channel-major activation `[c][b][h][w]`.
#[derive(Debug, Clone)]
struct Act<T> {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock<T> {
    spec: ConvSpec,
    weight: Param<T>,
    bias: Param<T>,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Vec<T>,
    running_var: Vec<T>,
}

impl PartialEq for ConvSpec {
    fn eq(&self, o: &Self) -> bool {
        (self.cin, self.cout, self.kh, self.kw, self.ph, self.pw, self.sw)
            == (o.cin, o.cout, o.kh, o.kw, o.ph, o.pw, o.sw)
    }
}

struct BlockCache<T> {
    in_shape: (usize, usize, usize, usize),
    col: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    out: Vec<T>,
}

fn im2col<T: Scalar>(x: &Act<T>, spec: &ConvSpec, ho: usize, wo: usize) -> Vec<T> {
    let p = x.b * ho * wo;
    let mut col = vec![T::zero(); spec.k() * p];
    for ci in 0..spec.cin {
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (ci * spec.kh + ki) * spec.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for b in 0..x.b {
                    for oh in 0..ho {
                        let ih = (oh + ki) as isize - spec.ph as isize;
                        if ih < 0 || ih >= x.h as isize {
                            continue;
                        }
                        let src = ((ci * x.b + b) * x.h + ih as usize) * x.w;
                        let base = (b * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * spec.sw + kj) as isize - spec.pw as isize;
                            if iw >= 0 && (iw as usize) < x.w {
                                dst[base + ow] = x.data[src + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(
    col: &[T],
    spec: &ConvSpec,
    shape: (usize, usize, usize, usize),
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let (c, nb, h, w) = shape;
    let p = nb * ho * wo;
    let mut dx = vec![T::zero(); c * nb * h * w];
    for ci in 0..spec.cin {
        for ki in 0..spec.kh {
            for kj in 0..spec.kw {
                let row = (ci * spec.kh + ki) * spec.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for b in 0..nb {
                    for oh in 0..ho {
                        let ih = (oh + ki) as isize - spec.ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = ((ci * nb + b) * h + ih as usize) * w;
                        let base = (b * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * spec.sw + kj) as isize - spec.pw as isize;
                            if iw >= 0 && (iw as usize) < w {
                                dx[dst + iw as usize] = dx[dst + iw as usize] + src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<T: Scalar> ConvBlock<T> {
    fn new(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (spec.k() as f64).sqrt();
        ConvBlock {
            spec,
            weight: Param::uniform(spec.cout * spec.k(), bound, rng),
            bias: Param::uniform(spec.cout, bound, rng),
            gamma: Param::new(vec![T::one(); spec.cout]),
            beta: Param::new(vec![T::zero(); spec.cout]),
            running_mean: vec![T::zero(); spec.cout],
            running_var: vec![T::one(); spec.cout],
        }
    }

    /// Returns the activation, the cache (train mode) and the batch
    /// mean/unbiased variance for the running-stat update.
    #[allow(clippy::type_complexity)]
    fn forward(&self, x: &Act<T>, train: bool) -> (Act<T>, Option<(BlockCache<T>, Vec<T>, Vec<T>)>) {
        let spec = &self.spec;
        let (ho, wo) = spec.out_dim(x.h, x.w);
        let p = x.b * ho * wo;
        let col = im2col(x, spec, ho, wo);
        let mut z = vec![T::zero(); spec.cout * p];
        for (co, row) in z.chunks_exact_mut(p).enumerate() {
            row.fill(self.bias.value[co]);
        }
        gemm(false, false, spec.cout, p, spec.k(), &self.weight.value, &col, T::one(), &mut z);

        let eps = cst::<T>(BN_EPS);
        let n = cst::<T>(p as f64);
        let mut inv_std = vec![T::zero(); spec.cout];
        let mut batch_mean = vec![T::zero(); spec.cout];
        let mut batch_var = vec![T::zero(); spec.cout];
        let mut xhat = if train { vec![T::zero(); z.len()] } else { Vec::new() };
        for co in 0..spec.cout {
            let row = &mut z[co * p..(co + 1) * p];
            let (mean, istd) = if train {
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                batch_mean[co] = mean;
                batch_var[co] = if p > 1 {
                    var * n / (n - T::one())
                } else {
                    var
                };
                (mean, T::one() / (var + eps).sqrt())
            } else {
                (
                    self.running_mean[co],
                    T::one() / (self.running_var[co] + eps).sqrt(),
                )
            };
            inv_std[co] = istd;
            let (g, bt) = (self.gamma.value[co], self.beta.value[co]);
            for (i, v) in row.iter_mut().enumerate() {
                let xh = (*v - mean) * istd;
                if train {
                    xhat[co * p + i] = xh;
                }
                *v = (g * xh + bt).max(T::zero());
            }
        }
        let out = Act {
            c: spec.cout,
            b: x.b,
            h: ho,
            w: wo,
            data: z,
        };
        let cache = train.then(|| {
            (
                BlockCache {
                    in_shape: (x.c, x.b, x.h, x.w),
                    col,
                    xhat,
                    inv_std,
                    out: out.data.clone(),
                },
                batch_mean,
                batch_var,
            )
        });
        (out, cache)
    }

    /// Writes parameter gradients and returns the input gradient if requested.
    fn backward(&mut self, cache: &BlockCache<T>, mut d: Vec<T>, need_input: bool) -> Option<Vec<T>> {
        let spec = self.spec;
        let p = d.len() / spec.cout;
        let n = cst::<T>(p as f64);
        for co in 0..spec.cout {
            let range = co * p..(co + 1) * p;
            let row = &mut d[range.clone()];
            let out = &cache.out[range.clone()];
            let xhat = &cache.xhat[range];
            let mut dgamma = T::zero();
            let mut dbeta = T::zero();
            for i in 0..p {
                if out[i] <= T::zero() {
                    row[i] = T::zero();
                }
                dgamma = dgamma + row[i] * xhat[i];
                dbeta = dbeta + row[i];
            }
            self.gamma.grad[co] = dgamma;
            self.beta.grad[co] = dbeta;
            let g = self.gamma.value[co];
            let scale = g * cache.inv_std[co] / n;
            for i in 0..p {
                row[i] = scale * (n * row[i] - dbeta - xhat[i] * dgamma);
            }
            self.bias.grad[co] = row.iter().copied().sum();
        }
        gemm(false, true, spec.cout, spec.k(), p, &d, &cache.col, T::zero(), &mut self.weight.grad);
        if !need_input {
            return None;
        }
        let mut dcol = vec![T::zero(); spec.k() * p];
        gemm(true, false, spec.k(), p, spec.cout, &self.weight.value, &d, T::zero(), &mut dcol);
        let (_, _, h, w) = cache.in_shape;
        let (ho, wo) = spec.out_dim(h, w);
        Some(col2im(&dcol, &spec, cache.in_shape, ho, wo))
    }
}

/// Whether a forward pass uses batch statistics and records a cache for
/// [`PhaseModel::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

struct TrainCache<T> {
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    flat: Vec<T>,
    last_shape: (usize, usize, usize, usize),
}

/// The phase-estimation network and its normalization statistics.
pub struct PhaseModel<T> {
    arch: Architecture,
    blocks: Vec<ConvBlock<T>>,
    dense_w: Param<T>,
    dense_b: Param<T>,
    cache: Option<TrainCache<T>>,
}

impl<T: Scalar> Clone for PhaseModel<T> {
    fn clone(&self) -> Self {
        PhaseModel {
            arch: self.arch,
            blocks: self.blocks.clone(),
            dense_w: self.dense_w.clone(),
            dense_b: self.dense_b.clone(),
            cache: None,
        }
    }
}

impl<T: Scalar> Debug for PhaseModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhaseModel")
            .field("arch", &self.arch)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl<T: Scalar> PhaseModel<T> {
    /// Fresh model with fan-in uniform initialization.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = arch
            .conv_specs()
            .into_iter()
            .map(|s| ConvBlock::new(s, &mut rng))
            .collect();
        let f = arch.flat_len();
        let bound = 1.0 / (f as f64).sqrt();
        Ok(PhaseModel {
            arch,
            blocks,
            dense_w: Param::uniform(2 * f, bound, &mut rng),
            dense_b: Param::uniform(2, bound, &mut rng),
            cache: None,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Learnable tensors in checkpoint order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            v.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        v.extend([&self.dense_w, &self.dense_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            v.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        v.extend([&mut self.dense_w, &mut self.dense_b]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Batch-norm running `(mean, variance)` per block.
    pub fn running_stats(&self) -> Vec<(&[T], &[T])> {
        self.blocks
            .iter()
            .map(|b| (b.running_mean.as_slice(), b.running_var.as_slice()))
            .collect()
    }

    /// True if every parameter and statistic is finite and every running
    /// variance is positive.
    pub fn is_valid(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
            && self.blocks.iter().all(|b| {
                b.running_mean.iter().all(|v| v.is_finite())
                    && b.running_var.iter().all(|v| v.is_finite() && *v > T::zero())
            })
    }

    fn to_act(&self, input: &[T], batch: usize) -> Result<Act<T>> {
        let (m, n) = (self.arch.chunk_len, self.arch.antennas);
        let len = self.arch.input_len();
        if batch == 0 || input.len() != batch * len {
            return Err(Error::Shape(format!(
                "expected {batch} × {len} input values, got {}",
                input.len()
            )));
        }
        let mut data = vec![T::zero(); input.len()];
        for b in 0..batch {
            let rec = &input[b * len..(b + 1) * len];
            let scale = if self.arch.normalize_input {
                let ms = rec.iter().map(|&v| v * v).sum::<T>() / cst((m * n) as f64);
                if ms > T::zero() {
                    T::one() / ms.sqrt()
                } else {
                    T::one()
                }
            } else {
                T::one()
            };
            for row in 0..2 {
                for t in 0..m {
                    for a in 0..n {
                        data[((a * batch + b) * 2 + row) * m + t] = rec[(row * m + t) * n + a] * scale;
                    }
                }
            }
        }
        Ok(Act {
            c: n,
            b: batch,
            h: 2,
            w: m,
            data,
        })
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        input: &[T],
        batch: usize,
        train: bool,
    ) -> Result<(Vec<[T; 2]>, Option<TrainCache<T>>, Vec<(Vec<T>, Vec<T>)>)> {
        let mut x = self.to_act(input, batch)?;
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        for block in &self.blocks {
            let (y, c) = block.forward(&x, train);
            if let Some((c, mean, var)) = c {
                caches.push(c);
                stats.push((mean, var));
            }
            x = y;
        }
        // Flatten to [batch][c·h·w].
        let hw = x.h * x.w;
        let f = x.c * hw;
        let mut flat = vec![T::zero(); batch * f];
        for c in 0..x.c {
            for b in 0..batch {
                flat[b * f + c * hw..b * f + (c + 1) * hw]
                    .copy_from_slice(&x.data[(c * batch + b) * hw..(c * batch + b + 1) * hw]);
            }
        }
        let mut out = vec![T::zero(); batch * 2];
        for row in out.chunks_exact_mut(2) {
            row.copy_from_slice(&self.dense_b.value);
        }
        gemm(false, true, batch, 2, f, &flat, &self.dense_w.value, T::one(), &mut out);
        let outputs = out.chunks_exact(2).map(|r| [r[0], r[1]]).collect();
        let cache = train.then_some(TrainCache {
            batch,
            blocks: caches,
            flat,
            last_shape: (x.c, x.b, x.h, x.w),
        });
        Ok((outputs, cache, stats))
    }

    /// Inference-mode forward pass over `batch` records (running statistics).
    pub fn infer(&self, input: &[T], batch: usize) -> Result<Vec<[T; 2]>> {
        Ok(self.run(input, batch, false)?.0)
    }

    /// Forward pass. Train mode uses batch statistics, updates the running
    /// statistics and keeps the cache needed by [`backward`](Self::backward).
    pub fn forward(&mut self, input: &[T], batch: usize, mode: Mode) -> Result<Vec<[T; 2]>> {
        self.cache = None;
        if mode == Mode::Infer {
            return self.infer(input, batch);
        }
        let (out, cache, stats) = self.run(input, batch, true)?;
        let m = cst::<T>(BN_MOMENTUM);
        for (block, (mean, var)) in self.blocks.iter_mut().zip(stats) {
            for c in 0..mean.len() {
                block.running_mean[c] = (T::one() - m) * block.running_mean[c] + m * mean[c];
                block.running_var[c] = (T::one() - m) * block.running_var[c] + m * var[c];
            }
        }
        self.cache = cache;
        Ok(out)
    }

    /// Back-propagates `dL/d(E1, E2)` for each record of the last train-mode
    /// batch, overwriting every parameter gradient.
    pub fn backward(&mut self, grad_out: &[[T; 2]]) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::ModeMismatch)?;
        if grad_out.len() != cache.batch {
            return Err(Error::LengthMismatch {
                expected: cache.batch,
                actual: grad_out.len(),
            });
        }
        let batch = cache.batch;
        let f = self.arch.flat_len();
        let dy: Vec<T> = grad_out.iter().flat_map(|g| g.iter().copied()).collect();
        gemm(true, false, 2, f, batch, &dy, &cache.flat, T::zero(), &mut self.dense_w.grad);
        for k in 0..2 {
            self.dense_b.grad[k] = grad_out.iter().map(|g| g[k]).sum();
        }
        let mut dflat = vec![T::zero(); batch * f];
        gemm(false, false, batch, f, 2, &dy, &self.dense_w.value, T::zero(), &mut dflat);
        let (c, _, h, w) = cache.last_shape;
        let hw = h * w;
        let mut d = vec![T::zero(); dflat.len()];
        for ci in 0..c {
            for b in 0..batch {
                d[(ci * batch + b) * hw..(ci * batch + b + 1) * hw]
                    .copy_from_slice(&dflat[b * f + ci * hw..b * f + (ci + 1) * hw]);
            }
        }
        for (i, (block, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            match block.backward(bc, d, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
        Ok(())
    }

    /// Inference on a single packed record, returning `(E1, E2)`.
    pub fn predict(&self, input: &[f32]) -> Result<(f64, f64)> {
        let x: Vec<T> = input.iter().map(|&v| cst(v as f64)).collect();
        let out = self.infer(&x, 1)?;
        Ok((to_f64(out[0][0]), to_f64(out[0][1])))
    }
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Value and output gradients of the dual squared-error loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualLoss {
    pub loss: f64,
    pub grad_e1: f64,
    pub grad_e2: f64,
}

/// `(Δθ1 − E1)² + (Δθ2 − E2)²` and its derivatives in `E1`, `E2`.
pub fn dual_loss(e1: f64, e2: f64, label_pi: f64, label_2pi: f64) -> DualLoss {
    let (r1, r2) = (label_pi - e1, label_2pi - e2);
    DualLoss {
        loss: r1 * r1 + r2 * r2,
        grad_e1: -2.0 * r1,
        grad_e2: -2.0 * r2,
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || params.iter().zip(&self.m).any(|(p, m)| p.len() != m.len()) {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = (cst::<T>(self.beta1), cst::<T>(self.beta2));
        let c1 = cst::<T>(1.0 / (1.0 - self.beta1.powi(self.t)));
        let c2 = cst::<T>(1.0 / (1.0 - self.beta2.powi(self.t)));
        let (lr, eps) = (cst::<T>(lr), cst::<T>(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Param { value, grad } = &mut **p;
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                value[i] = value[i] - lr * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once validation loss has failed
/// to improve for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::invalid(format!("plateau factor {factor} not in (0, 1)")));
        }
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        Ok(PlateauScheduler {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying `val_losses` through a [`PlateauScheduler`].
pub fn plateau_schedule(val_losses: &[f64], patience: usize, factor: f64, lr: f64) -> Result<f64> {
    let mut s = PlateauScheduler::new(lr, patience, factor)?;
    for &l in val_losses {
        s.step(l);
    }
    Ok(s.lr())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    /// Re-rotate both branches of every training record by fresh random
    /// phases each time it is drawn.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.005,
            batch_size: 256,
            max_epochs: 50,
            plateau_patience: 3,
            plateau_factor: 0.5,
            seed: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid("initial_lr must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("plateau_factor must be in (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs
            .get(self.best_epoch)
            .map_or(f64::INFINITY, |e| e.val_loss)
    }
}

fn gather<T: Scalar>(records: &[&LabeledRecord], len: usize) -> Result<Vec<T>> {
    let mut x = Vec::with_capacity(records.len() * len);
    for r in records {
        if r.input.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: r.input.len(),
            });
        }
        x.extend(r.input.iter().map(|&v| cst::<T>(v as f64)));
    }
    Ok(x)
}

/// Mean dual loss over `records` in inference mode.
pub fn evaluate<T: Scalar>(model: &PhaseModel<T>, records: &[LabeledRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let len = model.arch.input_len();
    let mut total = 0.0;
    for chunk in records.chunks(256) {
        let refs: Vec<&LabeledRecord> = chunk.iter().collect();
        let out = model.infer(&gather(&refs, len)?, chunk.len())?;
        for (o, r) in out.iter().zip(chunk) {
            total += dual_loss(to_f64(o[0]), to_f64(o[1]), r.label_pi as f64, r.label_2pi as f64).loss;
        }
    }
    Ok(total / records.len() as f64)
}

/// One optimizer step on a mini-batch; returns the batch mean loss.
pub fn train_step<T: Scalar>(
    model: &mut PhaseModel<T>,
    adam: &mut Adam<T>,
    batch: &[&LabeledRecord],
    lr: f64,
) -> Result<f64> {
    let x = gather::<T>(batch, model.arch.input_len())?;
    let out = model.forward(&x, batch.len(), Mode::Train)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let grads: Vec<[T; 2]> = out
        .iter()
        .zip(batch)
        .map(|(o, r)| {
            let l = dual_loss(to_f64(o[0]), to_f64(o[1]), r.label_pi as f64, r.label_2pi as f64);
            loss += l.loss;
            [cst(l.grad_e1 / n), cst(l.grad_e2 / n)]
        })
        .collect();
    loss /= n;
    if !loss.is_finite() {
        return Ok(loss);
    }
    model.backward(&grads)?;
    adam.step(&mut model.params_mut(), lr)?;
    Ok(loss)
}

/// Trains with Adam and plateau decay, returning the model with the lowest
/// validation loss. `on_epoch` is called after every epoch.
pub fn fit<T: Scalar>(
    mut model: PhaseModel<T>,
    train: &[LabeledRecord],
    val: &[LabeledRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(PhaseModel<T>, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0x7472_6169));
    let mut adam = Adam::new();
    let mut sched = PlateauScheduler::new(cfg.initial_lr, cfg.plateau_patience, cfg.plateau_factor)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    for epoch in 0..cfg.max_epochs {
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let augmented: Vec<LabeledRecord> = if cfg.augment {
                idx.iter()
                    .map(|&i| augment_with(&train[i], rng.random_range(-PI..PI), rng.random_range(-PI..PI)))
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<&LabeledRecord> = if cfg.augment {
                augmented.iter().collect()
            } else {
                idx.iter().map(|&i| &train[i]).collect()
            };
            let loss = train_step(&mut model, &mut adam, &batch, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
        }
        let val_loss = evaluate(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        let stats = EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            lr,
        };
        if val_loss < history.best_val_loss() {
            history.best_epoch = epoch;
            best = model.clone();
        }
        history.epochs.push(stats);
        on_epoch(&stats);
        sched.step(val_loss);
    }
    Ok((best, history))
}

const CKPT_MAGIC: &[u8; 4] = b"DBCK";
const CKPT_VERSION: u32 = 1;

fn arch_words(a: &Architecture) -> [u32; 8] {
    [
        a.antennas as u32,
        a.chunk_len as u32,
        a.widths[0] as u32,
        a.widths[1] as u32,
        a.widths[2] as u32,
        a.combine_width as u32,
        a.time_stride as u32,
        a.normalize_input as u32,
    ]
}

impl<T: Scalar> PhaseModel<T> {
    fn state_tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            v.extend([
                b.weight.value(),
                b.bias.value(),
                b.gamma.value(),
                b.beta.value(),
                &b.running_mean,
                &b.running_var,
            ]);
        }
        v.extend([self.dense_w.value(), self.dense_b.value()]);
        v
    }

    fn state_tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.weight.value);
            v.push(&mut b.bias.value);
            v.push(&mut b.gamma.value);
            v.push(&mut b.beta.value);
            v.push(&mut b.running_mean);
            v.push(&mut b.running_var);
        }
        v.push(&mut self.dense_w.value);
        v.push(&mut self.dense_b.value);
        v
    }

    /// Serializes the model: magic, version, architecture, then every
    /// parameter and running statistic as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for w in arch_words(&self.arch) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let tensors = self.state_tensors();
        let count: usize = tensors.iter().map(|t| t.len()).sum();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for t in tensors {
            for v in t {
                out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 4 + 4 + 8 * 4 + 8;
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                needed: header as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CKPT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CKPT_VERSION,
            });
        }
        if bytes.len() < header {
            return Err(Error::Truncated {
                needed: header as u64,
                found: bytes.len() as u64,
            });
        }
        let w: Vec<usize> = (0..8).map(|i| word(8 + 4 * i) as usize).collect();
        if w[7] > 1 {
            return Err(Error::Format("bad architecture flag".into()));
        }
        let arch = Architecture {
            antennas: w[0],
            chunk_len: w[1],
            widths: [w[2], w[3], w[4]],
            combine_width: w[5],
            time_stride: w[6],
            normalize_input: w[7] == 1,
        };
        let mut model = PhaseModel::<T>::new(arch, 0)?;
        let count = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));
        let expected: usize = model.state_tensors().iter().map(|t| t.len()).sum();
        if count != expected as u64 {
            return Err(Error::Shape(format!(
                "checkpoint holds {count} values but its architecture needs {expected}"
            )));
        }
        let needed = header as u64 + 4 * count;
        if (bytes.len() as u64) < needed {
            return Err(Error::Truncated {
                needed,
                found: bytes.len() as u64,
            });
        }
        let mut values = bytes[header..needed as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for t in model.state_tensors_mut() {
            for v in t.iter_mut() {
                *v = cst(values.next().expect("length checked") as f64);
            }
        }
        if !model.is_valid() {
            return Err(Error::Format("checkpoint contains invalid values".into()));
        }
        Ok(model)
    }
}

/// Writes a checkpoint file.
pub fn save_checkpoint<T: Scalar>(model: &PhaseModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&model.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint file, taking the architecture from its header.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<PhaseModel<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    PhaseModel::from_bytes(&bytes)
}

/// Like [`load_checkpoint`] but rejects a checkpoint whose architecture
/// differs from `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: impl AsRef<Path>, expected: &Architecture) -> Result<PhaseModel<T>> {
    let model = load_checkpoint::<T>(path)?;
    if model.architecture() != expected {
        return Err(Error::Shape(format!(
            "checkpoint architecture {:?} does not match {:?}",
            model.architecture(),
            expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_labeled_record, random_unit_samples};
    use crate::phasecore::SampleChunk;

    fn tiny(stride: usize) -> Architecture {
        Architecture {
            antennas: 2,
            chunk_len: 8,
            widths: [3, 4, 3],
            combine_width: 2,
            time_stride: stride,
            normalize_input: false,
        }
    }

    fn random_input(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn batch_loss(model: &mut PhaseModel<f64>, x: &[f64], batch: usize, labels: &[(f64, f64)]) -> f64 {
        let out = model.forward(x, batch, Mode::Train).unwrap();
        out.iter()
            .zip(labels)
            .map(|(o, l)| dual_loss(o[0], o[1], l.0, l.1).loss)
            .sum::<f64>()
            / batch as f64
    }

    fn check_gradients(arch: Architecture, seed: u64) {
        let batch = 3;
        let mut model = PhaseModel::<f64>::new(arch, seed).unwrap();
        let x = random_input(batch * arch.input_len(), seed + 1);
        let labels: Vec<(f64, f64)> = (0..batch).map(|i| (0.3 * i as f64 - 0.4, 1.0 + i as f64)).collect();

        let out = model.forward(&x, batch, Mode::Train).unwrap();
        let g: Vec<[f64; 2]> = out
            .iter()
            .zip(&labels)
            .map(|(o, l)| {
                let d = dual_loss(o[0], o[1], l.0, l.1);
                [d.grad_e1 / batch as f64, d.grad_e2 / batch as f64]
            })
            .collect();
        model.backward(&g).unwrap();
        let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad().to_vec()).collect();

        let h = 1e-4;
        for (pi, grads) in analytic.iter().enumerate() {
            for (i, &a) in grads.iter().enumerate() {
                let orig = model.params()[pi].value()[i];
                model.params_mut()[pi].value_mut()[i] = orig + h;
                let lp = batch_loss(&mut model, &x, batch, &labels);
                model.params_mut()[pi].value_mut()[i] = orig - h;
                let lm = batch_loss(&mut model, &x, batch, &labels);
                model.params_mut()[pi].value_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-3, "param {pi}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(tiny(1), 11);
        check_gradients(tiny(2), 12);
        check_gradients(Architecture { normalize_input: true, ..tiny(2) }, 13);
    }

    #[test]
    fn output_shape_and_shape_errors() {
        let arch = tiny(2);
        let model = PhaseModel::<f64>::new(arch, 3).unwrap();
        let x = random_input(arch.input_len(), 4);
        let out = model.infer(&x, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 2);
        assert!(out[0].iter().all(|v| v.is_finite()));
        assert!(matches!(model.infer(&x[1..], 1), Err(Error::Shape(_))));
        assert!(matches!(model.infer(&x, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn infer_is_pure() {
        let arch = Architecture::default();
        let mut model = PhaseModel::<f32>::new(arch, 5).unwrap();
        let x: Vec<f32> = random_input(4 * arch.input_len(), 6).iter().map(|&v| v as f32).collect();
        // Move running stats away from their initial values.
        model.forward(&x, 4, Mode::Train).unwrap();
        let a = model.infer(&x, 4).unwrap();
        let b = model.infer(&x, 4).unwrap();
        assert_eq!(a, b);
        let c = model.forward(&x, 4, Mode::Infer).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn backward_requires_train_forward() {
        let arch = tiny(1);
        let mut model = PhaseModel::<f64>::new(arch, 3).unwrap();
        let x = random_input(arch.input_len(), 4);
        assert!(matches!(model.backward(&[[1.0, 1.0]]), Err(Error::ModeMismatch)));
        model.forward(&x, 1, Mode::Train).unwrap();
        model.forward(&x, 1, Mode::Infer).unwrap();
        assert!(matches!(model.backward(&[[1.0, 1.0]]), Err(Error::ModeMismatch)));
        model.forward(&x, 1, Mode::Train).unwrap();
        model.backward(&[[1.0, 1.0]]).unwrap();
        assert!(matches!(model.backward(&[[1.0, 1.0]]), Err(Error::ModeMismatch)));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let arch = tiny(2);
        let mut model = PhaseModel::<f64>::new(arch, 8).unwrap();
        let x = random_input(2 * arch.input_len(), 9);
        model.forward(&x, 2, Mode::Train).unwrap();
        model.backward(&[[0.0, 0.0]; 2]).unwrap();
        assert!(model.params().iter().all(|p| p.grad().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn duplicated_batch_matches_single_example() {
        let arch = tiny(2);
        let x = random_input(arch.input_len(), 21);
        let grads = |copies: usize| {
            let mut model = PhaseModel::<f64>::new(arch, 20).unwrap();
            let xs: Vec<f64> = (0..copies).flat_map(|_| x.iter().copied()).collect();
            let out = model.forward(&xs, copies, Mode::Train).unwrap();
            let g: Vec<[f64; 2]> = out
                .iter()
                .map(|o| {
                    let d = dual_loss(o[0], o[1], 0.5, 2.0);
                    [d.grad_e1 / copies as f64, d.grad_e2 / copies as f64]
                })
                .collect();
            model.backward(&g).unwrap();
            model.params().iter().flat_map(|p| p.grad().to_vec()).collect::<Vec<f64>>()
        };
        let one = grads(1);
        let four = grads(4);
        for (a, b) in one.iter().zip(&four) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let arch = tiny(1);
        let model = PhaseModel::<f64>::new(arch, 30).unwrap();
        let input: Vec<f64> = random_input(5 * arch.input_len(), 31).iter().map(|v| 10.0 * v).collect();
        let x = model.to_act(&input, 5).unwrap();
        let block = &model.blocks[0];
        let (_, cache) = block.forward(&x, true);
        let (cache, _, _) = cache.unwrap();
        let p = cache.xhat.len() / block.spec.cout;
        for row in cache.xhat.chunks_exact(p) {
            let mean = row.iter().sum::<f64>() / p as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn running_stats_track_batches() {
        let arch = tiny(1);
        let mut model = PhaseModel::<f64>::new(arch, 40).unwrap();
        assert!(model.running_stats().iter().all(|(m, v)| m.iter().all(|&x| x == 0.0) && v.iter().all(|&x| x == 1.0)));
        let x = random_input(4 * arch.input_len(), 41);
        model.forward(&x, 4, Mode::Train).unwrap();
        assert!(model.is_valid());
        assert!(model.running_stats().iter().any(|(m, _)| m.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn dual_loss_examples() {
        assert_eq!(dual_loss(1.0, 2.0, 1.0, 2.0).loss, 0.0);
        let d = dual_loss(0.8, 1.2, 1.0, 1.0);
        let direct = (1.0f64 - 0.8).powi(2) + (1.0f64 - 1.2).powi(2);
        assert!((d.loss - direct).abs() < 1e-12);
        assert!((d.loss - 0.08).abs() < 1e-12);
        assert!((d.grad_e1 + 0.4).abs() < 1e-12);
        assert!((d.grad_e2 - 0.4).abs() < 1e-12);
        let h = 1e-6;
        let fd = (dual_loss(0.8 + h, 1.2, 1.0, 1.0).loss - dual_loss(0.8 - h, 1.2, 1.0, 1.0).loss) / (2.0 * h);
        assert!((fd - d.grad_e1).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e4] {
            let mut p = Param::new(vec![1.0f64]);
            p.grad_mut()[0] = g;
            let mut adam = Adam::new();
            adam.step(&mut [&mut p], 0.005).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let expected = 1.0 - 0.005 * g / (g.abs() + 1e-8);
            assert!((p.value()[0] - expected).abs() < 1e-12);
            assert!(((1.0 - p.value()[0]).abs() - 0.005).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_and_determinism() {
        let mut p = Param::new(vec![0.25f64, -1.5]);
        let mut adam = Adam::new();
        adam.step(&mut [&mut p], 0.005).unwrap();
        assert_eq!(p.value(), &[0.25, -1.5]);

        let run = || {
            let mut p = Param::new(vec![0.1f32, 0.2]);
            let mut adam = Adam::new();
            for k in 0..5 {
                p.grad_mut().copy_from_slice(&[k as f32 - 2.0, 0.5]);
                adam.step(&mut [&mut p], 0.01).unwrap();
            }
            p.value().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_examples() {
        assert_eq!(plateau_schedule(&[5.0, 4.0, 3.0, 2.0, 1.0], 3, 0.5, 0.005).unwrap(), 0.005);
        let mut s = PlateauScheduler::new(1.0, 3, 0.5).unwrap();
        let trace: Vec<f64> = [1.0, 1.0, 1.0, 1.0].iter().map(|&l| s.step(l)).collect();
        assert_eq!(trace, vec![1.0, 1.0, 1.0, 0.5]);
        assert_eq!(plateau_schedule(&[1.0; 7], 3, 0.5, 1.0).unwrap(), 0.25);
        assert!(PlateauScheduler::new(1.0, 3, 1.0).is_err());
        assert!(PlateauScheduler::new(1.0, 3, 0.0).is_err());
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { initial_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { plateau_factor: 1.5, ..Default::default() }.validate().is_err());
    }

    fn synthetic_records(n: usize, seed: u64) -> Vec<LabeledRecord> {
        (0..n as u64)
            .map(|i| {
                let tx = random_unit_samples(128, sub_seed(seed, i));
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1000 + i));
                let (t1, t2): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let b1 = crate::phasecore::rotate_samples(&tx, t1);
                let b2 = crate::phasecore::rotate_samples(&tx, t2);
                make_labeled_record(&SampleChunk::new(b1, 0), &SampleChunk::new(b2, 1), &SampleChunk::new(tx, 0)).unwrap()
            })
            .collect()
    }

    #[test]
    fn overfits_small_set() {
        let records = synthetic_records(32, 50);
        let model = PhaseModel::<f32>::new(Architecture::default(), 51).unwrap();
        let cfg = TrainConfig {
            max_epochs: 200,
            batch_size: 32,
            plateau_patience: 1000,
            augment: false,
            ..Default::default()
        };
        let (_, history) = fit(model, &records, &records, &cfg, |_| {}).unwrap();
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < 0.01, "train loss {last}");
    }

    #[test]
    fn fit_returns_best_validation_model() {
        let train = synthetic_records(64, 60);
        let val = synthetic_records(32, 61);
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_size: 16,
            ..Default::default()
        };
        let model = PhaseModel::<f32>::new(Architecture::default(), 62).unwrap();
        let mut seen = Vec::new();
        let (best, history) = fit(model, &train, &val, &cfg, |e| seen.push(*e)).unwrap();
        assert_eq!(seen, history.epochs);
        let best_loss = evaluate(&best, &val).unwrap();
        assert!((best_loss - history.best_val_loss()).abs() < 1e-9);
        assert!(history.epochs.iter().all(|e| best_loss <= e.val_loss + 1e-9));
    }

    #[test]
    fn fit_reports_divergence() {
        let train = synthetic_records(16, 70);
        let cfg = TrainConfig {
            initial_lr: 1e30,
            max_epochs: 20,
            batch_size: 4,
            ..Default::default()
        };
        let model = PhaseModel::<f32>::new(Architecture::default(), 71).unwrap();
        assert!(matches!(fit(model, &train, &train, &cfg, |_| {}), Err(Error::Diverged { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = Architecture::default();
        let mut model = PhaseModel::<f32>::new(arch, 80).unwrap();
        let x: Vec<f32> = random_input(3 * arch.input_len(), 81).iter().map(|&v| v as f32).collect();
        model.forward(&x, 3, Mode::Train).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.to_bytes(), model.to_bytes());
        assert_eq!(loaded.infer(&x, 3).unwrap(), model.infer(&x, 3).unwrap());
        load_checkpoint_for::<f32>(&path, &arch).unwrap();
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let model = PhaseModel::<f32>::new(tiny(2), 90).unwrap();
        let bytes = model.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PhaseModel::<f32>::from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(PhaseModel::<f32>::from_bytes(&bad), Err(Error::Version { found: 9, .. })));

        assert!(matches!(
            PhaseModel::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));

        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(PhaseModel::<f32>::from_bytes(&bad), Err(Error::Shape(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ckpt");
        save_checkpoint(&model, &path).unwrap();
        assert!(matches!(
            load_checkpoint_for::<f32>(&path, &Architecture::default()),
            Err(Error::Shape(_))
        ));
    }
}
