//! Selective state-space layer and the post-normalization Mamba (PNM) block.
//!
//! The layer keeps a diagonal `A = −exp(A_log)` per channel and derives the
//! step sizes `Δ`, input gains `B` and readouts `C` from the input at every
//! position. Discretization is zero-order hold.

pub mod scan;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use scan::{discretize, scan_discretized, scan_kernel, zoh, DiscretizedPair};

use crate::error::{Error, Result};
use crate::layers::{Conv1d, FeatureRmsNorm, Linear};
use crate::numerics::{Padding, Tensor, Var};
use crate::params::{Forward, ParamBuilder, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    /// State dimension `N`.
    pub state_dim: usize,
    /// Inner width of a PNM block as a multiple of its input width.
    pub expand: usize,
    pub conv_width: usize,
    /// Learnable `D·x` skip term.
    pub skip: bool,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            expand: 2,
            conv_width: 4,
            skip: true,
            dt_min: 0.01,
            dt_max: 0.1,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(Error::config("model.state_dim", "state_dim, expand and conv_width must be ≥ 1"));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::config("model.dt_min", "need 0 < dt_min ≤ dt_max"));
        }
        Ok(())
    }
}

/// Parameters of one selective scan over `H` channels.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub a_log: ParamId,
    pub d: ParamId,
    /// Low-rank step-size projection `H → r → H`.
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub channels: usize,
    pub state_dim: usize,
    pub skip: bool,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmLayer {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, channels: usize, cfg: &SsmConfig) -> Result<Self> {
        let mut p = p.scope(name);
        let n = cfg.state_dim;
        let rank = channels.div_ceil(16).max(1);
        // Realized A spans −1 … −N on every channel.
        let a_log = p.tensor("a_log", Tensor::from_fn(&[channels, n], |i| ((i[1] + 1) as f64).ln()))?;
        let d = p.constant("d", &[channels], 1.0)?;
        let dt_down = p.uniform("dt_down", &[rank, channels], 1.0 / (channels as f64).sqrt())?;
        let dt_up = p.uniform("dt_up", &[channels, rank], 1.0 / (rank as f64).sqrt())?;
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let rng = p.rng();
        let bias: Vec<f64> = (0..channels)
            .map(|_| {
                let u: f64 = rng.random();
                inverse_softplus((lo + u * (hi - lo)).exp())
            })
            .collect();
        let dt_bias = p.tensor("dt_bias", Tensor::from_vec(bias))?;
        let bound = 1.0 / (channels as f64).sqrt();
        let w_b = p.uniform("w_b", &[n, channels], bound)?;
        let w_c = p.uniform("w_c", &[n, channels], bound)?;
        Ok(Self {
            a_log,
            d,
            dt_down,
            dt_up,
            dt_bias,
            w_b,
            w_c,
            channels,
            state_dim: n,
            skip: cfg.skip,
        })
    }

    /// `x: [H, L] → [H, L]`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (down, up, bias) = (f.param(self.dt_down), f.param(self.dt_up), f.param(self.dt_bias));
        let low = f.g.matmul(down, x)?;
        let pre = f.g.matmul(up, low)?;
        let pre = f.g.add_col_bias(pre, bias)?;
        let delta = f.g.softplus(pre);
        let (wb, wc) = (f.param(self.w_b), f.param(self.w_c));
        let b = f.g.matmul(wb, x)?;
        let c = f.g.matmul(wc, x)?;
        let (a_log, d) = (f.param(self.a_log), f.param(self.d));
        f.g.selective_scan(x, delta, a_log, b, c, d, self.skip)
    }
}

/// Selective scan on a plain tensor: `x: [H, L] → [H, L]`.
pub fn selective_scan(x: &Tensor, layer: &SsmLayer, store: &ParamStore) -> Result<Tensor> {
    let mut f = Forward::new(store);
    let xv = f.input(x.clone());
    let y = layer.forward(&mut f, xv)?;
    Ok(f.value(y).clone())
}

/// Gated Mamba block followed by RMS normalization.
///
/// `x → [in-proj | gate-proj]`, the first half through a causal depthwise
/// conv, SiLU and the selective scan, multiplied by `silu(gate)`, projected
/// back to the input width and RMS-normalized.
#[derive(Clone, Debug)]
pub struct PnmBlock {
    pub in_proj: Linear,
    pub conv: Conv1d,
    pub ssm: SsmLayer,
    pub out_proj: Linear,
    pub norm: FeatureRmsNorm,
    pub width: usize,
    pub inner: usize,
}

impl PnmBlock {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, width: usize, inner: usize, cfg: &SsmConfig) -> Result<Self> {
        let mut p = p.scope(name);
        Ok(Self {
            in_proj: Linear::new(&mut p, "in_proj", width, 2 * inner, true)?,
            conv: Conv1d::new(&mut p, "conv", inner, cfg.conv_width, Padding::Causal)?,
            ssm: SsmLayer::new(&mut p, "ssm", inner, cfg)?,
            out_proj: Linear::new(&mut p, "out_proj", inner, width, true)?,
            norm: FeatureRmsNorm::new(&mut p, "norm", width)?,
            width,
            inner,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let proj = self.in_proj.forward(f, x)?;
        let xs = f.g.slice_rows(proj, 0, self.inner)?;
        let z = f.g.slice_rows(proj, self.inner, self.inner)?;
        let u = self.conv.forward(f, xs)?;
        let u = f.g.silu(u);
        let y = self.ssm.forward(f, u)?;
        let gate = f.g.silu(z);
        let y = f.g.mul(y, gate)?;
        let out = self.out_proj.forward(f, y)?;
        self.norm.forward(f, out)
    }
}

/// PNM block on a plain tensor: `x: [C, L] → [C, L]`.
pub fn pnm_block(x: &Tensor, block: &PnmBlock, store: &ParamStore) -> Result<Tensor> {
    let mut f = Forward::new(store);
    let xv = f.input(x.clone());
    let y = block.forward(&mut f, xv)?;
    Ok(f.value(y).clone())
}
