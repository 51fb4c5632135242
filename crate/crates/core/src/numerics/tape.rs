//! A small reverse-mode tape. Every op records its inputs and whatever it
//! needs for the backward pass; [`Graph::backward`] walks the tape once.

use super::ops::{gemm, layer_norm_with_stats, rms_norm_with_stats, Activation, Padding};
use super::Tensor;
use crate::error::{Error, Result};
use crate::ssm::scan::{scan_backward, scan_forward, ScanInputs};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x[m, n] + b[m]` broadcast along columns.
    AddColBias(Var, Var),
    /// `x[.., n] + b[n]` broadcast along rows.
    AddRowBias(Var, Var),
    /// `x[m, n] * g[m]`.
    MulColBroadcast(Var, Var),
    Unary(Var, Activation),
    Conv {
        x: Var,
        kernel: Var,
        padding: Padding,
    },
    FlipLast(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        stats: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    BroadcastCols(Var),
    MeanCols(Var),
    SumAll(Var),
    MaskedMeanSq {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        count: f64,
    },
    Scan {
        inputs: [Var; 6],
        states: Vec<f64>,
        skip: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients indexed by [`Var`]. Nodes the output does not depend on have
/// no entry.
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

/// Computation tape. Values are computed eagerly as ops are recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inference: bool,
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that only evaluates: scans keep no state trajectories and
    /// [`Graph::backward`] is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            inference: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (m, n) = xv.dims2()?;
        if bv.len() != m {
            return Err(shape_err("add_col_bias", xv, bv));
        }
        let mut out = xv.clone();
        for (row, &bias) in out.data_mut().chunks_mut(n.max(1)).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(out, Op::AddColBias(x, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.last_dim();
        if bv.len() != n {
            return Err(shape_err("add_row_bias", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(out, Op::AddRowBias(x, b)))
    }

    pub fn mul_col_broadcast(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        let (m, n) = xv.dims2()?;
        if gv.len() != m {
            return Err(shape_err("mul_col_broadcast", xv, gv));
        }
        let mut out = xv.clone();
        for (row, &s) in out.data_mut().chunks_mut(n.max(1)).zip(gv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulColBroadcast(x, g)))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        self.push(out, Op::Unary(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Silu)
    }

    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let out = super::ops::depthwise_conv1d(self.value(x), self.value(kernel), padding)?;
        Ok(self.push(out, Op::Conv { x, kernel, padding }))
    }

    pub fn flip_last(&mut self, a: Var) -> Var {
        let out = self.value(a).flip_last();
        self.push(out, Op::FlipLast(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, stats) = layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (out, stats) = rms_norm_with_stats(self.value(x), self.value(gain), eps)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, stats }))
    }

    /// Stacks 2-D values with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows of zero tensors"));
        };
        let (_, n) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.dims2()?;
            if c != n {
                return Err(shape_err("concat_rows", self.value(first), v));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if start + len > m {
            return Err(Error::dim(format!("slice_rows {start}+{len} exceeds {m} rows")));
        }
        let out = Tensor::matrix(len, n, xv.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// `[m]` or `[m, 1]` → `[m, n]`.
    pub fn broadcast_cols(&mut self, v: Var, n: usize) -> Var {
        let vv = self.value(v);
        let m = vv.len();
        let mut data = Vec::with_capacity(m * n);
        for &x in vv.data() {
            data.extend(std::iter::repeat_n(x, n));
        }
        let out = Tensor::matrix(m, n, data).expect("consistent extents");
        self.push(out, Op::BroadcastCols(v))
    }

    /// Mean of each row: `[m, n]` → `[m, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if n == 0 {
            return Err(Error::dim("mean over an empty axis"));
        }
        let data = xv.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let out = Tensor::matrix(m, 1, data)?;
        Ok(self.push(out, Op::MeanCols(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::from_vec(vec![s]), Op::SumAll(x))
    }

    /// `Σ mask·(pred − target)² / Σ mask`, with `target` and `mask` constant.
    pub fn masked_mean_sq(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_same_shape(target)?;
        pv.expect_same_shape(mask)?;
        let count: f64 = mask.sum();
        if count <= 0.0 {
            return Err(Error::DegenerateBatch("empty loss mask".into()));
        }
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((p, t), m)| m * (p - t) * (p - t))
            .sum();
        let op = Op::MaskedMeanSq {
            pred,
            target: target.data().to_vec(),
            mask: mask.data().to_vec(),
            count,
        };
        Ok(self.push(Tensor::from_vec(vec![s / count]), op))
    }

    /// Selective scan over `x: [H, L]` with step sizes `delta: [H, L]`,
    /// `a_log: [H, N]`, input-dependent `b, c: [N, L]` and skip `d: [H]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var, skip: bool) -> Result<Var> {
        let inputs = ScanInputs::new(
            self.value(x),
            self.value(delta),
            self.value(a_log),
            self.value(b),
            self.value(c),
            self.value(d),
            skip,
        )?;
        let (y, states) = scan_forward(&inputs, !self.inference)?;
        Ok(self.push(
            y,
            Op::Scan {
                inputs: [x, delta, a_log, b, c, d],
                states,
                skip,
            },
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        if self.inference {
            return Err(Error::domain("backward on an inference-only tape"));
        }
        if self.value(output).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                let (av, bv) = (val(*a).data(), val(*b).data());
                accumulate(&mut grads[a.0], m * k, |da| gemm(m, n, k, g, false, bv, true, da, true));
                accumulate(&mut grads[b.0], k * n, |db| gemm(k, m, n, av, true, g, false, db, true));
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                accumulate(&mut grads[a.0], r * c, |da| {
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                add_into(&mut grads[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                add_into(&mut grads[a.0], &ga);
                add_into(&mut grads[b.0], &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::AddColBias(x, b) => {
                add_into(&mut grads[x.0], g);
                let (m, n) = node.value.dims2()?;
                accumulate(&mut grads[b.0], m, |db| {
                    for (r, row) in g.chunks(n.max(1)).enumerate() {
                        db[r] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                add_into(&mut grads[x.0], g);
                let n = node.value.last_dim();
                accumulate(&mut grads[b.0], n, |db| {
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::MulColBroadcast(x, s) => {
                let (m, n) = node.value.dims2()?;
                let (xv, sv) = (val(*x).data(), val(*s).data());
                accumulate(&mut grads[x.0], m * n, |dx| {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[r * n + c] * sv[r];
                        }
                    }
                });
                accumulate(&mut grads[s.0], m, |ds| {
                    for r in 0..m {
                        ds[r] += (0..n).map(|c| g[r * n + c] * xv[r * n + c]).sum::<f64>();
                    }
                });
            }
            Op::Unary(a, kind) => {
                let xv = val(*a).data();
                let yv = node.value.data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Conv { x, kernel, padding } => {
                let (c, l) = val(*x).dims2()?;
                let (_, k) = val(*kernel).dims2()?;
                let out_len = node.value.last_dim();
                let left = padding.left(k);
                let (xv, kv) = (val(*x).data(), val(*kernel).data());
                let mut dx = vec![0.0; c * l];
                let mut dk = vec![0.0; c * k];
                for ch in 0..c {
                    let gs = &g[ch * out_len..(ch + 1) * out_len];
                    let xs = &xv[ch * l..(ch + 1) * l];
                    for j in 0..k {
                        let w = kv[ch * k + j];
                        let lo = left.saturating_sub(j);
                        let hi = (l + left).saturating_sub(j).min(out_len);
                        let mut acc = 0.0;
                        for t in lo..hi {
                            let src = t + j - left;
                            dx[ch * l + src] += gs[t] * w;
                            acc += gs[t] * xs[src];
                        }
                        dk[ch * k + j] += acc;
                    }
                }
                add_into(&mut grads[x.0], &dx);
                add_into(&mut grads[kernel.0], &dk);
            }
            Op::FlipLast(a) => {
                let n = node.value.last_dim().max(1);
                let mut ga = g.to_vec();
                ga.chunks_mut(n).for_each(|r| r.reverse());
                add_into(&mut grads[a.0], &ga);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = node.value.last_dim();
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let off = r * d;
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..d {
                        xhat[j] = (xv[off + j] - mean) * rstd;
                        dxhat[j] = g[off + j] * gv[j];
                        dg[j] += g[off + j] * xhat[j];
                        db[j] += g[off + j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[off + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                add_into(&mut grads[x.0], &dx);
                add_into(&mut grads[gain.0], &dg);
                add_into(&mut grads[bias.0], &db);
            }
            Op::RmsNorm { x, gain, stats } => {
                let d = node.value.last_dim();
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                for (row, &r) in stats.iter().enumerate() {
                    let off = row * d;
                    let mut dot = 0.0;
                    for j in 0..d {
                        let gx = g[off + j] * gv[j];
                        dot += gx * xv[off + j];
                        dg[j] += g[off + j] * xv[off + j] * r;
                    }
                    let coef = r * r * r * dot / d as f64;
                    for j in 0..d {
                        dx[off + j] = r * g[off + j] * gv[j] - coef * xv[off + j];
                    }
                }
                add_into(&mut grads[x.0], &dx);
                add_into(&mut grads[gain.0], &dg);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    add_into(&mut grads[p.0], &g[off..off + len]);
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = val(*x).dims2()?;
                let start = *start;
                accumulate(&mut grads[x.0], m * n, |dx| {
                    dx[start * n..start * n + g.len()].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                });
            }
            Op::BroadcastCols(v) => {
                let m = val(*v).len();
                let n = node.value.last_dim();
                accumulate(&mut grads[v.0], m, |dv| {
                    for r in 0..m {
                        dv[r] += g[r * n..(r + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::MeanCols(x) => {
                let (m, n) = val(*x).dims2()?;
                accumulate(&mut grads[x.0], m * n, |dx| {
                    for r in 0..m {
                        let s = g[r] / n as f64;
                        dx[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += s);
                    }
                });
            }
            Op::SumAll(x) => {
                let n = val(*x).len();
                accumulate(&mut grads[x.0], n, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MaskedMeanSq { pred, target, mask, count } => {
                let pv = val(*pred).data();
                let scale = 2.0 * g[0] / count;
                let gp: Vec<f64> = pv.iter().zip(target).zip(mask).map(|((p, t), m)| scale * m * (p - t)).collect();
                add_into(&mut grads[pred.0], &gp);
            }
            Op::Scan { inputs, states, skip } => {
                let [x, delta, a_log, b, c, d] = *inputs;
                let si = ScanInputs::new(val(x), val(delta), val(a_log), val(b), val(c), val(d), *skip)?;
                let sg = scan_backward(&si, states, g);
                add_into(&mut grads[x.0], &sg.dx);
                add_into(&mut grads[delta.0], &sg.ddelta);
                add_into(&mut grads[a_log.0], &sg.da_log);
                add_into(&mut grads[b.0], &sg.db);
                add_into(&mut grads[c.0], &sg.dc);
                add_into(&mut grads[d.0], &sg.dd);
            }
        }
        Ok(())
    }
}
