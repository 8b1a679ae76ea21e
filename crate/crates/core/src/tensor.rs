//! Dense layer kernels with hand-written reverse-mode gradients.
//!
//! Every kernel works on one sample at a time over flat slices laid out
//! channel-major (`channel * bins + bin`). Backward functions accumulate into
//! the gradient buffers they are given; callers zero them. Kernels are
//! generic over [`Real`] so gradient checks can run in `f64` while training
//! and inference run in `f32`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floating-point type a kernel can run in.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `acc + w * x`, fused when the target has FMA.
#[inline(always)]
fn madd<T: Real>(acc: T, w: T, x: T) -> T {
    if cfg!(target_feature = "fma") {
        w.mul_add(x, acc)
    } else {
        acc + w * x
    }
}

/// `out[i] += sum_k kernel[k] * signal[i + k]` for every `i` in `out`.
/// Outputs are computed in blocks held in registers; wide blocks keep
/// enough independent accumulators to hide multiply-add latency.
pub fn correlate<T: Real>(signal: &[T], kernel: &[T], out: &mut [T]) {
    let m = out.len();
    let kl = kernel.len();
    if m == 0 || kl == 0 {
        return;
    }
    assert!(signal.len() + 1 >= m + kl, "correlate: signal too short");
    let mut i0 = 0;
    while i0 + 64 <= m {
        correlate_block::<T, 64>(signal, kernel, out, i0);
        i0 += 64;
    }
    while i0 + 16 <= m {
        correlate_block::<T, 16>(signal, kernel, out, i0);
        i0 += 16;
    }
    if i0 == m {
        return;
    }
    if m >= 16 {
        // Recompute the last full block and keep only its new outputs.
        let start = m - 16;
        let mut acc = [T::zero(); 16];
        block_sum::<T, 16>(&signal[start..], kernel, &mut acc);
        for i in i0..m {
            out[i] = out[i] + acc[i - start];
        }
    } else {
        for i in i0..m {
            out[i] = out[i] + dot(kernel, &signal[i..i + kl]);
        }
    }
}

/// `acc[l] += sum_k kernel[k] * signal[l + k]` for `l < N`.
#[inline(always)]
fn block_sum<T: Real, const N: usize>(signal: &[T], kernel: &[T], acc: &mut [T; N]) {
    let window = &signal[..kernel.len() + N - 1];
    for (&wk, s) in kernel.iter().zip(window.windows(N)) {
        let s: &[T; N] = s.try_into().expect("block length");
        for l in 0..N {
            acc[l] = madd(acc[l], wk, s[l]);
        }
    }
}

#[inline(always)]
fn correlate_block<T: Real, const N: usize>(signal: &[T], kernel: &[T], out: &mut [T], i0: usize) {
    let mut acc: [T; N] = out[i0..i0 + N].try_into().expect("block length");
    block_sum(&signal[i0..], kernel, &mut acc);
    out[i0..i0 + N].copy_from_slice(&acc);
}

/// Same-padded 1-D cross-correlation along the bin axis.
///
/// `x` is `c_in x n`, `weight` is `c_out x c_in x ks`, `out` is `c_out x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub bins: usize,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, bins: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 || bins == 0 {
            return invalid("conv dimensions must be positive");
        }
        if kernel % 2 == 0 {
            return invalid(format!("conv kernel size {kernel} must be odd for same padding"));
        }
        Ok(Conv1d {
            c_in,
            c_out,
            kernel,
            bins,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel
    }

    /// Channels of `x` with `kernel / 2` zeros on both sides.
    fn padded<T: Real>(&self, x: &[T], channels: usize) -> Vec<T> {
        let n = self.bins;
        let pad = self.kernel / 2;
        let w = n + 2 * pad;
        let mut out = vec![T::zero(); channels * w];
        for c in 0..channels {
            out[c * w + pad..c * w + pad + n].copy_from_slice(&x[c * n..(c + 1) * n]);
        }
        out
    }

    pub fn forward<T: Real>(&self, x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
        let n = self.bins;
        debug_assert_eq!(x.len(), self.c_in * n);
        debug_assert_eq!(weight.len(), self.weight_len());
        debug_assert_eq!(out.len(), self.c_out * n);
        let xp = self.padded(x, self.c_in);
        for co in 0..self.c_out {
            let row = &mut out[co * n..(co + 1) * n];
            let mut i0 = 0;
            while i0 + 64 <= n {
                row[i0..i0 + 64].copy_from_slice(&self.block::<T, 64>(&xp, weight, bias[co], co, i0));
                i0 += 64;
            }
            while i0 + 16 <= n {
                row[i0..i0 + 16].copy_from_slice(&self.block::<T, 16>(&xp, weight, bias[co], co, i0));
                i0 += 16;
            }
            if i0 < n {
                if n >= 16 {
                    // Overlapping last block; only its new outputs are kept.
                    let start = n - 16;
                    let acc = self.block::<T, 16>(&xp, weight, bias[co], co, start);
                    row[i0..].copy_from_slice(&acc[i0 - start..]);
                } else {
                    row.fill(bias[co]);
                    let w = n + self.kernel - 1;
                    for ci in 0..self.c_in {
                        let taps = &weight[(co * self.c_in + ci) * self.kernel..][..self.kernel];
                        correlate(&xp[ci * w..(ci + 1) * w], taps, row);
                    }
                }
            }
        }
    }

    /// Outputs `i0..i0 + N` of channel `co`, summed over all inputs and taps.
    #[inline(always)]
    fn block<T: Real, const N: usize>(&self, xp: &[T], weight: &[T], bias: T, co: usize, i0: usize) -> [T; N] {
        let w = self.bins + self.kernel - 1;
        let mut acc = [bias; N];
        for ci in 0..self.c_in {
            let taps = &weight[(co * self.c_in + ci) * self.kernel..][..self.kernel];
            block_sum(&xp[ci * w + i0..(ci + 1) * w], taps, &mut acc);
        }
        acc
    }

    /// Accumulate gradients; `gx` may be `None` when the input needs none.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        weight: &[T],
        gout: &[T],
        gx: Option<&mut [T]>,
        gw: &mut [T],
        gb: &mut [T],
    ) {
        let n = self.bins;
        let ks = self.kernel;
        let w = n + ks - 1;
        let xp = self.padded(x, self.c_in);
        for co in 0..self.c_out {
            let g = &gout[co * n..(co + 1) * n];
            gb[co] = gb[co] + g.iter().copied().sum::<T>();
            for ci in 0..self.c_in {
                let base = (co * self.c_in + ci) * ks;
                correlate(&xp[ci * w..(ci + 1) * w], g, &mut gw[base..base + ks]);
            }
        }
        if let Some(gx) = gx {
            // Input gradient: correlation of the padded output gradient
            // with the flipped kernel.
            let gp = self.padded(gout, self.c_out);
            let mut flipped = vec![T::zero(); ks];
            for ci in 0..self.c_in {
                let gxc = &mut gx[ci * n..(ci + 1) * n];
                for co in 0..self.c_out {
                    let taps = &weight[(co * self.c_in + ci) * ks..][..ks];
                    flipped.iter_mut().zip(taps.iter().rev()).for_each(|(f, &t)| *f = t);
                    correlate(&gp[co * w..(co + 1) * w], &flipped, gxc);
                }
            }
        }
    }
}

/// Per-sample normalization over all of `x` with an elementwise affine map.
/// Returns `(mean, 1/std)` for the backward pass.
pub fn layernorm_forward<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: f64, out: &mut [T]) -> (T, T) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    let (m, r) = (T::of(mean), T::of(rstd));
    for i in 0..x.len() {
        out[i] = (x[i] - m) * r * gain[i] + bias[i];
    }
    (m, r)
}

pub fn layernorm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    stats: (T, T),
    gout: &[T],
    gx: Option<&mut [T]>,
    ggain: &mut [T],
    gbias: &mut [T],
) {
    let (mean, rstd) = stats;
    let n = x.len();
    let mut sum_g = 0.0;
    let mut sum_gx = 0.0;
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        ggain[i] = ggain[i] + gout[i] * xhat;
        gbias[i] = gbias[i] + gout[i];
        let g = (gout[i] * gain[i]).f64();
        sum_g += g;
        sum_gx += g * xhat.f64();
    }
    if let Some(gx) = gx {
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let xhat = ((x[i] - mean) * rstd).f64();
            let g = (gout[i] * gain[i]).f64();
            let d = rstd.f64() * (g - inv_n * sum_g - xhat * inv_n * sum_gx);
            gx[i] = gx[i] + T::of(d);
        }
    }
}

pub fn leaky_relu_forward<T: Real>(x: &[T], slope: T, out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v >= T::zero() { v } else { v * slope };
    }
}

/// Derivative at exactly zero is taken as 1.
pub fn leaky_relu_backward<T: Real>(x: &[T], slope: T, gout: &[T], gx: &mut [T]) {
    for i in 0..x.len() {
        let d = if x[i] >= T::zero() { T::one() } else { slope };
        gx[i] = gx[i] + gout[i] * d;
    }
}

/// Fill `mask` with survivor scales (0 or `1/(1-rate)`) and apply it.
/// Outside training, or at rate 0, the mask is all ones.
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    x: &[T],
    rate: f64,
    training: bool,
    rng: &mut R,
    mask: &mut [T],
    out: &mut [T],
) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return invalid(format!("dropout rate {rate} outside [0, 1)"));
    }
    if !training || rate == 0.0 {
        mask.fill(T::one());
        out.copy_from_slice(x);
        return Ok(());
    }
    let keep = T::of(1.0 / (1.0 - rate));
    for i in 0..x.len() {
        mask[i] = if rng.gen::<f64>() < rate { T::zero() } else { keep };
        out[i] = x[i] * mask[i];
    }
    Ok(())
}

pub fn dropout_backward<T: Real>(mask: &[T], gout: &[T], gx: &mut [T]) {
    for i in 0..mask.len() {
        gx[i] = gx[i] + gout[i] * mask[i];
    }
}

/// Bias-free linear map with constant diagonals:
/// `out[i] = sum_j a[i - j + n - 1] * x[j]`, `a` of length `m + n - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToeplitzFc {
    pub n_in: usize,
    pub n_out: usize,
}

impl ToeplitzFc {
    pub fn new(n_in: usize, n_out: usize) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return invalid("toeplitz layer dimensions must be positive");
        }
        Ok(ToeplitzFc { n_in, n_out })
    }

    pub fn n_diagonals(&self) -> usize {
        self.n_in + self.n_out - 1
    }

    pub fn check(&self, x: &[impl Copy], a: &[impl Copy]) -> Result<()> {
        if x.len() != self.n_in {
            return invalid(format!("toeplitz input length {} != {}", x.len(), self.n_in));
        }
        if a.len() != self.n_diagonals() {
            return invalid(format!(
                "toeplitz needs {} diagonals, got {}",
                self.n_diagonals(),
                a.len()
            ));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, x: &[T], a: &[T], out: &mut [T]) {
        let m = self.n_out;
        out[..m].fill(T::zero());
        let xr: Vec<T> = x.iter().rev().copied().collect();
        correlate(a, &xr, &mut out[..m]);
    }

    pub fn backward<T: Real>(&self, x: &[T], a: &[T], gout: &[T], gx: Option<&mut [T]>, ga: &mut [T]) {
        let (n, m) = (self.n_in, self.n_out);
        // ga[d] += sum_i g[i] x[n - 1 - d + i]: a correlation of x, padded
        // by m - 1 zeros on both sides, with the output gradient, read back
        // in reverse.
        let mut xp = vec![T::zero(); n + 2 * (m - 1)];
        xp[m - 1..m - 1 + n].copy_from_slice(x);
        let mut gd = vec![T::zero(); n + m - 1];
        correlate(&xp, &gout[..m], &mut gd);
        for (e, v) in gd.into_iter().enumerate() {
            let d = n + m - 2 - e;
            ga[d] = ga[d] + v;
        }
        if let Some(gx) = gx {
            // gx[n - 1 - e] = sum_i g[i] a[i + e]
            let mut ge = vec![T::zero(); n];
            correlate(a, &gout[..m], &mut ge);
            for (e, v) in ge.into_iter().enumerate() {
                gx[n - 1 - e] = gx[n - 1 - e] + v;
            }
        }
    }

    /// The explicit `m x n` matrix, row-major.
    pub fn dense_matrix<T: Real>(&self, a: &[T]) -> Vec<T> {
        let (n, m) = (self.n_in, self.n_out);
        let mut mat = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                mat[i * n + j] = a[i + n - 1 - j];
            }
        }
        mat
    }
}

/// Unstructured bias-free linear map, `w` row-major `m x n`.
pub fn dense_forward<T: Real>(x: &[T], w: &[T], m: usize, out: &mut [T]) {
    let n = x.len();
    for i in 0..m {
        out[i] = dot(&w[i * n..(i + 1) * n], x);
    }
}

pub fn dense_backward<T: Real>(x: &[T], w: &[T], m: usize, gout: &[T], gx: Option<&mut [T]>, gw: &mut [T]) {
    let n = x.len();
    for i in 0..m {
        axpy(gout[i], x, &mut gw[i * n..(i + 1) * n]);
    }
    if let Some(gx) = gx {
        for i in 0..m {
            axpy(gout[i], &w[i * n..(i + 1) * n], gx);
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax_forward<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += o.f64();
    }
    let inv = T::of(1.0 / sum);
    out.iter_mut().for_each(|o| *o = flush(*o * inv));
}

/// Subnormals cost a microcode assist per FMA; peaked softmax outputs produce
/// them in bulk.
#[inline]
pub fn flush<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

/// Jacobian-vector product: `gx += y * (gout - <gout, y>)`.
pub fn softmax_backward<T: Real>(y: &[T], gout: &[T], gx: &mut [T]) {
    let s = T::of(y.iter().zip(gout).map(|(a, b)| (*a * *b).f64()).sum::<f64>());
    for i in 0..y.len() {
        gx[i] = flush(gx[i] + y[i] * (gout[i] - s));
    }
}

/// A named parameter: `f32` values with an `f64` gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Append a parameter; returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return invalid(format!("duplicate parameter name '{name}'"));
        }
        if tensor.data.len() != tensor.shape.iter().product::<usize>() {
            return invalid(format!("parameter '{name}' data does not match its shape"));
        }
        self.entries.push((name, tensor));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.grad.clear();
            t.grad.resize(t.data.len(), 0.0);
        }
    }

    /// Parameter values converted to the compute type.
    pub fn values<T: Real>(&self) -> Vec<Vec<T>> {
        self.entries
            .iter()
            .map(|(_, t)| t.data.iter().map(|&v| T::of(v as f64)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_delta_kernel_is_identity() {
        let conv = Conv1d::new(1, 1, 3, 5).unwrap();
        let x = [1.0, -2.0, 3.0, 0.5, 4.0];
        let mut out = [0.0; 5];
        conv.forward(&x, &[0.0, 1.0, 0.0], &[0.0], &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_box_kernel() {
        let conv = Conv1d::new(1, 1, 3, 3).unwrap();
        let mut out = [0.0; 3];
        conv.forward(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[0.0], &mut out);
        assert_eq!(out, [3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        assert!(Conv1d::new(1, 1, 4, 8).is_err());
    }

    #[test]
    fn layernorm_two_points() {
        let mut out = [0.0; 2];
        layernorm_forward(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 0.0, &mut out);
        assert!((out[0] + 1.0f64).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
        let mut out = [1.0; 4];
        layernorm_forward(&[2.5; 4], &[1.0; 4], &[0.0; 4], 1e-5, &mut out);
        assert!(out.iter().all(|&v: &f64| v == 0.0));
    }

    #[test]
    fn leaky_relu_values() {
        let mut out = [0.0; 3];
        leaky_relu_forward(&[-1.0, 2.0, 0.0], 0.3, &mut out);
        assert_eq!(out, [-0.3, 2.0, 0.0]);
        let mut g = [0.0; 3];
        leaky_relu_backward(&[-1.0, 2.0, 0.0], 0.3, &[1.0; 3], &mut g);
        assert_eq!(g, [0.3, 1.0, 1.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (mut mask, mut out) = (vec![0.0; 100], vec![0.0; 100]);
        dropout_forward(&x, 0.2, false, &mut rng, &mut mask, &mut out).unwrap();
        assert_eq!(out, x);
        dropout_forward(&x, 0.0, true, &mut rng, &mut mask, &mut out).unwrap();
        assert_eq!(out, x);
        assert!(dropout_forward(&x, 1.0, true, &mut rng, &mut mask, &mut out).is_err());
        assert!(dropout_forward(&x, -0.1, true, &mut rng, &mut mask, &mut out).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = vec![1.0f32; n];
        let (mut mask, mut out) = (vec![0.0f32; n], vec![0.0f32; n]);
        dropout_forward(&x, 0.2, true, &mut rng, &mut mask, &mut out).unwrap();
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((kept - 0.8).abs() < 0.002, "{kept}");
        assert!(out.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
    }

    #[test]
    fn toeplitz_examples() {
        let fc = ToeplitzFc::new(3, 3).unwrap();
        let a = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(fc.dense_matrix(&a), vec![3.0, 4.0, 5.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0]);
        let mut out = [0.0; 3];
        fc.forward(&[1.0, 1.0, 1.0], &a, &mut out);
        assert_eq!(out, [12.0, 9.0, 6.0]);

        let mut ident = [0.0; 5];
        ident[2] = 1.0;
        fc.forward(&[7.0, 8.0, 9.0], &ident, &mut out);
        assert_eq!(out, [7.0, 8.0, 9.0]);
        assert!(fc.check(&[1.0; 2], &a).is_err());
        assert!(fc.check(&[1.0; 3], &a[..4]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut out = [0.0; 2];
        softmax_forward(&[0.0, 0.0], &mut out);
        assert_eq!(out, [0.5, 0.5]);
        softmax_forward(&[1000.0f64, 0.0], &mut out);
        assert_eq!(out, [1.0, 0.0]);
    }

    #[test]
    fn param_store_rules() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::zeros(&[2, 3])).unwrap();
        assert!(ps.add("a", Tensor::zeros(&[1])).is_err());
        ps.add("b", Tensor::zeros(&[4])).unwrap();
        assert_eq!(ps.n_scalars(), 10);
        let names: Vec<_> = ps.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a", "b"]);
    }
}
