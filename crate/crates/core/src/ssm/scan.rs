//! Zero-order-hold discretization and the fused selective-scan kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Below this `|Δ·A|` the ZOH input gain uses its truncated series.
pub const SERIES_THRESHOLD: f64 = 0.1;

/// Branch-free `exp` for the scan loops, accurate to a few ulp on
/// `[-708, 709]`; smaller arguments flush to 0.
#[inline]
pub(crate) fn fast_exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let xc = x.clamp(-708.0, 709.0);
    // Adding and removing 1.5·2⁵² rounds to the nearest integer.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let shifted = xc * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r¹³ on |r| ≤ ln2/2.
    let mut p: f64 = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // The low mantissa bits of `shifted` hold `k` in two's complement.
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

/// `(exp(z) - 1) / z` given `e = exp(z)`.
#[inline]
pub(crate) fn phi_with_exp(z: f64, e: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        // Σ_{k<10} z^k / (k+1)!; the first omitted term is below 3e-16.
        1.0 + z
            * (1.0 / 2.0
                + z * (1.0 / 6.0
                    + z * (1.0 / 24.0
                        + z * (1.0 / 120.0
                            + z * (1.0 / 720.0 + z * (1.0 / 5040.0 + z * (1.0 / 40320.0 + z * (1.0 / 362880.0 + z / 3628800.0))))))))
    } else {
        (e - 1.0) / z
    }
}

/// `(exp(z) - 1) / z`.
#[cfg(test)]
pub(crate) fn phi(z: f64) -> f64 {
    phi_with_exp(z, fast_exp(z))
}

/// Derivative of [`phi`] given `e = exp(z)`.
#[inline]
pub(crate) fn dphi_with_exp(z: f64, e: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 / 2.0
            + z * (1.0 / 3.0
                + z * (1.0 / 8.0
                    + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z * (1.0 / 840.0 + z * (1.0 / 5760.0 + z * (1.0 / 45360.0 + z / 403200.0)))))))
    } else {
        (z * e - (e - 1.0)) / (z * z)
    }
}

/// ZOH for one diagonal entry: `(Ā, B̄) = (exp(Δa), (Δa)⁻¹(exp(Δa) − 1)·Δb)`.
pub fn zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta <= 0.0 || !delta.is_finite() {
        return Err(Error::domain(format!("step size must be positive, got {delta}")));
    }
    let z = delta * a;
    let e = fast_exp(z);
    Ok((e, phi_with_exp(z, e) * delta * b))
}

/// Discretized transition and input gains, laid out `[L, H, N]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedPair {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

/// Discretizes a diagonal `a: [H, N]` with input-dependent `b: [N, L]` and
/// step sizes `delta: [H, L]`.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<DiscretizedPair> {
    let (h, n) = a.dims2()?;
    let (nb, l) = b.dims2()?;
    let (hd, ld) = delta.dims2()?;
    if nb != n || hd != h || ld != l {
        return Err(Error::dim(format!(
            "discretize: A {:?}, B {:?}, Δ {:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        )));
    }
    let mut a_bar = vec![0.0; l * h * n];
    let mut b_bar = vec![0.0; l * h * n];
    for t in 0..l {
        for hh in 0..h {
            let dt = delta.at(hh, t);
            for nn in 0..n {
                let (ab, bb) = zoh(a.at(hh, nn), b.at(nn, t), dt)?;
                let i = (t * h + hh) * n + nn;
                a_bar[i] = ab;
                b_bar[i] = bb;
            }
        }
    }
    Ok(DiscretizedPair {
        a_bar: Tensor::new(vec![l, h, n], a_bar)?,
        b_bar: Tensor::new(vec![l, h, n], b_bar)?,
    })
}

/// Runs the recurrence on already-discretized gains:
/// `h_k = Ā_k h_{k−1} + B̄_k x_k`, `y_k = C_kᵀ h_k + D x_k`.
///
/// `x: [H, L]`, `pair` as from [`discretize`], `c: [N, L]`, `d: [H]`.
pub fn scan_discretized(x: &Tensor, pair: &DiscretizedPair, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (h, l) = x.dims2()?;
    let (lp, hp, n) = pair.a_bar.dims3()?;
    let (nc, lc) = c.dims2()?;
    if lp != l || hp != h || nc != n || lc != l || d.len() != h || pair.b_bar.shape() != pair.a_bar.shape() {
        return Err(Error::dim("scan_discretized: inconsistent shapes"));
    }
    if l == 0 {
        return Err(Error::dim("empty sequence"));
    }
    let mut y = vec![0.0; h * l];
    let mut state = vec![0.0; n];
    for hh in 0..h {
        state.fill(0.0);
        for t in 0..l {
            let xv = x.at(hh, t);
            let mut acc = d.data()[hh] * xv;
            for nn in 0..n {
                let i = (t * h + hh) * n + nn;
                state[nn] = pair.a_bar.data()[i] * state[nn] + pair.b_bar.data()[i] * xv;
                acc += c.at(nn, t) * state[nn];
            }
            y[hh * l + t] = acc;
        }
    }
    Tensor::matrix(h, l, y)
}

/// Borrowed, validated inputs of the fused kernel.
pub(crate) struct ScanInputs<'a> {
    pub h: usize,
    pub l: usize,
    pub n: usize,
    pub x: &'a [f64],
    pub delta: &'a [f64],
    /// Realized diagonal `A = −exp(A_log)`, `[H, N]`.
    pub a: Vec<f64>,
    /// `B`, `C` transposed to `[L, N]`.
    pub b_t: Vec<f64>,
    pub c_t: Vec<f64>,
    pub d: &'a [f64],
    pub skip: bool,
}

impl<'a> ScanInputs<'a> {
    pub fn new(
        x: &'a Tensor,
        delta: &'a Tensor,
        a_log: &'a Tensor,
        b: &'a Tensor,
        c: &'a Tensor,
        d: &'a Tensor,
        skip: bool,
    ) -> Result<Self> {
        let (h, l) = x.dims2()?;
        let (ha, n) = a_log.dims2()?;
        if l == 0 {
            return Err(Error::dim("selective scan over an empty sequence"));
        }
        if delta.shape() != x.shape() || ha != h || b.shape() != [n, l] || c.shape() != [n, l] || d.len() != h {
            return Err(Error::dim(format!(
                "selective scan shapes: x {:?}, Δ {:?}, A_log {:?}, B {:?}, C {:?}, D {:?}",
                x.shape(),
                delta.shape(),
                a_log.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        if let Some(bad) = delta.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::domain(format!("step size must be positive, got {bad}")));
        }
        let transpose = |m: &Tensor| {
            let mut out = vec![0.0; n * l];
            for nn in 0..n {
                for t in 0..l {
                    out[t * n + nn] = m.data()[nn * l + t];
                }
            }
            out
        };
        Ok(Self {
            h,
            l,
            n,
            x: x.data(),
            delta: delta.data(),
            a: a_log.data().iter().map(|v| -v.exp()).collect(),
            b_t: transpose(b),
            c_t: transpose(c),
            d: d.data(),
            skip,
        })
    }
}

/// Forward scan. With `keep_states` the state trajectory `[H, L, N]`
/// followed by the transition gains `Ā` in the same layout is returned for
/// the backward pass.
pub(crate) fn scan_forward(s: &ScanInputs<'_>, keep_states: bool) -> Result<(Tensor, Vec<f64>)> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { scan_forward_avx2(s, keep_states) };
        }
    }
    scan_forward_impl(s, keep_states)
}

/// The portable loop compiled with wider vectors; arithmetic is identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_forward_avx2(s: &ScanInputs<'_>, keep_states: bool) -> Result<(Tensor, Vec<f64>)> {
    scan_forward_impl(s, keep_states)
}

#[inline(always)]
fn scan_forward_impl(s: &ScanInputs<'_>, keep_states: bool) -> Result<(Tensor, Vec<f64>)> {
    let (h, l, n) = (s.h, s.l, s.n);
    let mut y = vec![0.0; h * l];
    let mut states = if keep_states { vec![0.0; 2 * h * l * n] } else { Vec::new() };
    let mut gains = vec![0.0; n];
    let mut state = vec![0.0; n];
    for hh in 0..h {
        state.fill(0.0);
        let a = &s.a[hh * n..(hh + 1) * n];
        let skip = if s.skip { s.d[hh] } else { 0.0 };
        for t in 0..l {
            let xv = s.x[hh * l + t];
            let dt = s.delta[hh * l + t];
            let bt = &s.b_t[t * n..(t + 1) * n];
            let ct = &s.c_t[t * n..(t + 1) * n];
            let gain_x = dt * xv;
            for (((st, g), &av), &bv) in state.iter_mut().zip(gains.iter_mut()).zip(a).zip(bt) {
                let z = dt * av;
                let e = fast_exp(z);
                *g = e;
                *st = e * *st + phi_with_exp(z, e) * gain_x * bv;
            }
            let mut acc = skip * xv;
            for (&cv, &st) in ct.iter().zip(&state) {
                acc += cv * st;
            }
            y[hh * l + t] = acc;
            if keep_states {
                let at = (hh * l + t) * n;
                states[at..at + n].copy_from_slice(&state);
                states[h * l * n + at..h * l * n + at + n].copy_from_slice(&gains);
            }
        }
    }
    Ok((Tensor::matrix(h, l, y)?, states))
}

pub(crate) struct ScanGrads {
    pub dx: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub da_log: Vec<f64>,
    /// `[N, L]`.
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd: Vec<f64>,
}

struct LaneInputs<'a> {
    a: &'a [f64],
    st: &'a [f64],
    prev: &'a [f64],
    gain: &'a [f64],
    bt: &'a [f64],
    ct: &'a [f64],
}

struct LaneOutputs<'a> {
    dc: &'a mut [f64],
    db: &'a mut [f64],
    da: &'a mut [f64],
    carry: &'a mut [f64],
    gx: &'a mut [f64],
    gdt: &'a mut [f64],
}

/// One step of the reverse recurrence across the `N` state lanes.
#[inline(always)]
fn backward_lanes((g, xv, dt): (f64, f64, f64), i: LaneInputs<'_>, o: LaneOutputs<'_>) {
    let n = i.a.len();
    let (st, prev, gain, bt, ct) = (&i.st[..n], &i.prev[..n], &i.gain[..n], &i.bt[..n], &i.ct[..n]);
    let (dc, db, da) = (&mut o.dc[..n], &mut o.db[..n], &mut o.da[..n]);
    let (carry, gx, gdt) = (&mut o.carry[..n], &mut o.gx[..n], &mut o.gdt[..n]);
    for nn in 0..n {
        // st = abar * prev + ph * dt * bv * xv
        dc[nn] += g * st[nn];
        let gs = carry[nn] + g * ct[nn];
        let z = dt * i.a[nn];
        let abar = gain[nn];
        let ph = phi_with_exp(z, abar);
        let bv = bt[nn];
        let d_bbar = gs * xv;
        gx[nn] = gs * ph * dt * bv;
        let dz = gs * prev[nn] * abar + d_bbar * dt * bv * dphi_with_exp(z, abar);
        gdt[nn] = d_bbar * ph * bv + dz * i.a[nn];
        da[nn] += dz * dt;
        db[nn] += d_bbar * ph * dt;
        carry[nn] = gs * abar;
    }
}

pub(crate) fn scan_backward(s: &ScanInputs<'_>, states: &[f64], dy: &[f64]) -> ScanGrads {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { scan_backward_avx2(s, states, dy) };
        }
    }
    scan_backward_impl(s, states, dy)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_backward_avx2(s: &ScanInputs<'_>, states: &[f64], dy: &[f64]) -> ScanGrads {
    scan_backward_impl(s, states, dy)
}

#[inline(always)]
fn scan_backward_impl(s: &ScanInputs<'_>, states: &[f64], dy: &[f64]) -> ScanGrads {
    let (h, l, n) = (s.h, s.l, s.n);
    let mut dx = vec![0.0; h * l];
    let mut ddelta = vec![0.0; h * l];
    let mut da = vec![0.0; h * n];
    let mut db_t = vec![0.0; l * n];
    let mut dc_t = vec![0.0; l * n];
    let mut dd = vec![0.0; h];
    let mut carry = vec![0.0; n];
    let zeros = vec![0.0; n];
    let mut gx_terms = vec![0.0; n];
    let mut gdt_terms = vec![0.0; n];
    let (trajectory, gains) = states.split_at(h * l * n);
    for hh in 0..h {
        carry.fill(0.0);
        let a = &s.a[hh * n..(hh + 1) * n];
        let da_h = &mut da[hh * n..(hh + 1) * n];
        let skip = if s.skip { s.d[hh] } else { 0.0 };
        for t in (0..l).rev() {
            let idx = hh * l + t;
            let g = dy[idx];
            let xv = s.x[idx];
            let dt = s.delta[idx];
            if s.skip {
                dd[hh] += g * xv;
            }
            let st = &trajectory[idx * n..(idx + 1) * n];
            let prev = if t > 0 { &trajectory[(idx - 1) * n..idx * n] } else { &zeros[..] };
            let gain = &gains[idx * n..(idx + 1) * n];
            let bt = &s.b_t[t * n..(t + 1) * n];
            let ct = &s.c_t[t * n..(t + 1) * n];
            let dc = &mut dc_t[t * n..(t + 1) * n];
            let db = &mut db_t[t * n..(t + 1) * n];
            backward_lanes(
                (g, xv, dt),
                LaneInputs { a, st, prev, gain, bt, ct },
                LaneOutputs {
                    dc,
                    db,
                    da: &mut *da_h,
                    carry: &mut carry,
                    gx: &mut gx_terms,
                    gdt: &mut gdt_terms,
                },
            );
            let mut gx = g * skip;
            let mut gdt = 0.0;
            for (&a, &b) in gx_terms.iter().zip(gdt_terms.iter()) {
                gx += a;
                gdt += b;
            }
            dx[idx] += gx;
            ddelta[idx] += gdt;
        }
    }
    let da_log = da.iter().zip(&s.a).map(|(g, a)| g * a).collect();
    let untranspose = |m: &[f64]| {
        let mut out = vec![0.0; n * l];
        for t in 0..l {
            for nn in 0..n {
                out[nn * l + t] = m[t * n + nn];
            }
        }
        out
    };
    ScanGrads {
        dx,
        ddelta,
        da_log,
        db: untranspose(&db_t),
        dc: untranspose(&dc_t),
        dd,
    }
}

/// Forward-only scan on plain tensors; see [`crate::numerics::Graph::selective_scan`].
pub fn scan_kernel(x: &Tensor, delta: &Tensor, a_log: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor, skip: bool) -> Result<Tensor> {
    let inputs = ScanInputs::new(x, delta, a_log, b, c, d, skip)?;
    scan_forward(&inputs, false).map(|(y, _)| y)
}
