//! Forward kernels shared by the plain-tensor API and the autodiff tape.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), with `op(a)` of
/// shape `m × k` and `op(b)` of shape `k × n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents passed in.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::matrix(m, n, out)
}

/// `y = W·x + b` along the trailing axis of `x`.
pub fn linear_map(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = w.dims2()?;
    if x.last_dim() != d_in || x.ndim() == 0 {
        return Err(Error::dim(format!("linear_map: input {:?} does not end in {}", x.shape(), d_in)));
    }
    if b.len() != d_out {
        return Err(Error::dim(format!("linear_map: bias has {} entries, expected {}", b.len(), d_out)));
    }
    let rows = x.leading();
    let mut out = vec![0.0; rows * d_out];
    gemm(rows, d_in, d_out, x.data(), false, w.data(), true, &mut out, false);
    for row in out.chunks_mut(d_out) {
        for (o, bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = d_out;
    Tensor::new(shape, out)
}

/// Padding convention for [`depthwise_conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// `k - 1` zeros on the left; output at `l` sees inputs `≤ l`.
    Causal,
    /// `(k - 1) / 2` zeros on the left, the rest on the right.
    Same,
    /// No padding; output length `L - k + 1`.
    Valid,
}

impl Padding {
    pub(crate) fn left(self, k: usize) -> usize {
        match self {
            Padding::Causal => k - 1,
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub(crate) fn out_len(self, len: usize, k: usize) -> usize {
        match self {
            Padding::Valid => len + 1 - k,
            _ => len,
        }
    }
}

/// Per-channel 1-D cross-correlation of `x: [C, L]` with `kernel: [C, k]`.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    let (c, l) = x.dims2()?;
    let (kc, k) = kernel.dims2()?;
    if kc != c {
        return Err(Error::dim(format!("conv kernel has {kc} channels, input has {c}")));
    }
    if k == 0 {
        return Err(Error::dim("conv kernel width must be at least 1"));
    }
    if padding == Padding::Valid && k > l {
        return Err(Error::dim(format!(
            "kernel width {k} exceeds sequence length {l} under valid padding"
        )));
    }
    let left = padding.left(k);
    let out_len = padding.out_len(l, k);
    let mut out = vec![0.0; c * out_len];
    for ch in 0..c {
        let xs = &x.data()[ch * l..(ch + 1) * l];
        let ks = &kernel.data()[ch * k..(ch + 1) * k];
        let ys = &mut out[ch * out_len..(ch + 1) * out_len];
        for (j, &w) in ks.iter().enumerate() {
            // ys[t] += w * xs[t + j - left]
            let lo = left.saturating_sub(j);
            let hi = (l + left).saturating_sub(j).min(out_len);
            for t in lo..hi {
                ys[t] += w * xs[t + j - left];
            }
        }
    }
    Tensor::matrix(c, out_len, out)
}

pub const NORM_EPS: f64 = 1e-5;

/// Layer normalization over the trailing axis. Returns the output together
/// with per-row `(mean, 1/std)` for reuse in backward passes.
pub(crate) fn layer_norm_with_stats(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let d = x.last_dim();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(Error::dim(format!(
            "layer_norm: input {:?}, gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = x.clone();
    let mut stats = Vec::with_capacity(x.leading());
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain.data()[i] + bias.data()[i];
        }
        stats.push((mean, rstd));
    }
    Ok((out, stats))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

pub(crate) fn rms_norm_with_stats(x: &Tensor, gain: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = x.last_dim();
    if d == 0 || gain.len() != d {
        return Err(Error::dim(format!("rms_norm: input {:?}, gain {:?}", x.shape(), gain.shape())));
    }
    let mut out = x.clone();
    let mut stats = Vec::with_capacity(x.leading());
    for row in out.data_mut().chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= r * g;
        }
        stats.push(r);
    }
    Ok((out, stats))
}

/// `y = x / sqrt(mean(x²) + eps) ⊙ gain` over the trailing axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    rms_norm_with_stats(x, gain, eps).map(|(y, _)| y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Softplus,
    Silu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Silu => silu(x),
        }
    }

    /// d(activation)/dx given the input `x` and output `y`.
    #[inline]
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}
