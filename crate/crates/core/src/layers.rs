//! Parameterized building blocks shared by the SSM, block and denoiser
//! modules. Sequences are `[features, time]` throughout.

use crate::error::Result;
use crate::numerics::{Padding, Var, NORM_EPS};
use crate::params::{Forward, ParamBuilder, ParamId};

/// Feature-wise affine map applied at every time step: `[in, L] → [out, L]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut p = p.scope(name);
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = p.uniform("weight", &[d_out, d_in], bound)?;
        let b = if bias { Some(p.uniform("bias", &[d_out], bound)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.w);
        let y = f.g.matmul(w, x)?;
        match self.b {
            Some(b) => {
                let b = f.param(b);
                f.g.add_col_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Depthwise 1-D convolution along time with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, channels: usize, width: usize, padding: Padding) -> Result<Self> {
        let mut p = p.scope(name);
        let bound = 1.0 / (width as f64).sqrt();
        Ok(Self {
            kernel: p.uniform("kernel", &[channels, width], bound)?,
            bias: p.uniform("bias", &[channels], bound)?,
            padding,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let k = f.param(self.kernel);
        let b = f.param(self.bias);
        let y = f.g.depthwise_conv1d(x, k, self.padding)?;
        f.g.add_col_bias(y, b)
    }
}

/// Layer normalization across features at each time step.
#[derive(Clone, Debug)]
pub struct FeatureLayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl FeatureLayerNorm {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, d: usize) -> Result<Self> {
        let mut p = p.scope(name);
        Ok(Self {
            gain: p.constant("gain", &[d], 1.0)?,
            bias: p.constant("bias", &[d], 0.0)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (f.param(self.gain), f.param(self.bias));
        let xt = f.g.transpose(x)?;
        let y = f.g.layer_norm(xt, gain, bias, NORM_EPS)?;
        f.g.transpose(y)
    }
}

/// RMS normalization across features at each time step.
#[derive(Clone, Debug)]
pub struct FeatureRmsNorm {
    pub gain: ParamId,
}

impl FeatureRmsNorm {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, d: usize) -> Result<Self> {
        let mut p = p.scope(name);
        Ok(Self {
            gain: p.constant("gain", &[d], 1.0)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gain = f.param(self.gain);
        let xt = f.g.transpose(x)?;
        let y = f.g.rms_norm(xt, gain, NORM_EPS)?;
        f.g.transpose(y)
    }
}
