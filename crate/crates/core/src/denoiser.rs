//! The noise-estimation network `ε_θ(X_t, t | X_cond)`.
//!
//! Noisy input (with the condition mask appended as extra channels) and the
//! condition input are each projected to the sequence width and passed
//! through their own SMM stack. The diffusion-step embedding is merged into
//! the noisy-input embedding, the result goes through a sequential SMM, is
//! merged with the condition embedding, goes through a second sequential SMM
//! and is projected back to the data channels.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, Smm};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Tensor, Var};
use crate::params::{Forward, ParamBuilder, ParamStore};
use crate::ssm::SsmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub seq_dim: usize,
    /// Width that sets the PNM inner dimension of every BAM branch
    /// (`ssm.expand × residual_channels`).
    pub residual_channels: usize,
    pub diffusion_embed_dim: usize,
    pub n_cond_smm: usize,
    pub n_input_smm: usize,
    pub n_seq_smm: usize,
    pub block: BlockConfig,
    pub ssm: SsmConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            seq_dim: 128,
            residual_channels: 128,
            diffusion_embed_dim: 128,
            n_cond_smm: 1,
            n_input_smm: 1,
            n_seq_smm: 1,
            block: BlockConfig::default(),
            ssm: SsmConfig::default(),
        }
    }
}

impl DenoiserConfig {
    /// Small network used by tests and desk-scale runs.
    pub fn tiny(width: usize) -> Self {
        Self {
            seq_dim: width,
            residual_channels: width,
            diffusion_embed_dim: width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.seq_dim", self.seq_dim),
            ("model.residual_channels", self.residual_channels),
            ("model.diffusion_embed_dim", self.diffusion_embed_dim),
            ("model.n_cond_smm", self.n_cond_smm),
            ("model.n_input_smm", self.n_input_smm),
            ("model.n_seq_smm", self.n_seq_smm),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be ≥ 1"));
            }
        }
        self.block.validate()?;
        self.ssm.validate()
    }
}

/// Which embedding path an input goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Noisy targets stacked with the condition mask (`2K` channels).
    Noisy,
    Condition,
}

#[derive(Clone, Debug)]
struct Architecture {
    input_proj: Linear,
    input_smm: Vec<Smm>,
    cond_proj: Linear,
    cond_smm: Vec<Smm>,
    step_proj1: Linear,
    step_proj2: Linear,
    step_fuse: Linear,
    seq1: Vec<Smm>,
    cond_fuse: Linear,
    seq2: Vec<Smm>,
    out_proj: Linear,
}

/// Shape of the data a denoiser is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub channels: usize,
    pub length: usize,
}

/// Network parameters together with the layer layout that reads them.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    shape: DataShape,
    max_step: usize,
    pub params: ParamStore,
    arch: Architecture,
}

fn smm_stack(p: &mut ParamBuilder<'_>, name: &str, count: usize, cfg: &DenoiserConfig, seq_len: usize) -> Result<Vec<Smm>> {
    let inner = cfg.ssm.expand * cfg.residual_channels;
    (0..count)
        .map(|i| Smm::new(p, &format!("{name}{i}"), cfg.seq_dim, inner, seq_len, &cfg.block, &cfg.ssm))
        .collect()
}

/// Sinusoidal featurization of a diffusion step: half sines, half cosines,
/// frequencies spaced geometrically from 1 to 10⁴.
pub fn step_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { 4.0 * i as f64 / (half - 1) as f64 } else { 0.0 };
        let arg = t as f64 * 10f64.powf(exponent);
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_vec(out)
}

impl Denoiser {
    /// Builds a freshly initialized network for data of `shape` and
    /// diffusion steps `1..=max_step`.
    pub fn new(config: DenoiserConfig, shape: DataShape, max_step: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if shape.channels == 0 || shape.length == 0 {
            return Err(Error::dim("data shape must have K, L ≥ 1"));
        }
        if max_step == 0 {
            return Err(Error::domain("need at least one diffusion step"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (k, l) = (shape.channels, shape.length);
        let (c, e) = (config.seq_dim, config.diffusion_embed_dim);
        let arch = {
            let mut p = ParamBuilder::new(&mut store, &mut rng);
            Architecture {
                input_proj: Linear::new(&mut p, "input.proj", 2 * k, c, true)?,
                input_smm: smm_stack(&mut p, "input.smm", config.n_input_smm, &config, l)?,
                cond_proj: Linear::new(&mut p, "cond.proj", k, c, true)?,
                cond_smm: smm_stack(&mut p, "cond.smm", config.n_cond_smm, &config, l)?,
                step_proj1: Linear::new(&mut p, "step.proj1", e, e, true)?,
                step_proj2: Linear::new(&mut p, "step.proj2", e, e, true)?,
                step_fuse: Linear::new(&mut p, "step.fuse", c + e, c, true)?,
                seq1: smm_stack(&mut p, "seq1.smm", config.n_seq_smm, &config, l)?,
                cond_fuse: Linear::new(&mut p, "cond.fuse", 2 * c, c, true)?,
                seq2: smm_stack(&mut p, "seq2.smm", config.n_seq_smm, &config, l)?,
                out_proj: Linear::new(&mut p, "output.proj", c, k, true)?,
            }
        };
        Ok(Self {
            config,
            shape,
            max_step,
            params: store,
            arch,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    pub fn max_step(&self) -> usize {
        self.max_step
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.max_step {
            return Err(Error::domain(format!("diffusion step {t} outside 1..={}", self.max_step)));
        }
        Ok(())
    }

    /// Step embedding `[E, 1]` on the tape.
    pub fn embed_step_var(&self, f: &mut Forward<'_>, t: usize) -> Result<Var> {
        self.check_step(t)?;
        let e = self.config.diffusion_embed_dim;
        let feats = f.input(step_features(t, e).reshape(vec![e, 1])?);
        let h = self.arch.step_proj1.forward(f, feats)?;
        let h = f.g.silu(h);
        self.arch.step_proj2.forward(f, h)
    }

    pub fn embed_diffusion_step(&self, t: usize) -> Result<Tensor> {
        let mut f = Forward::new(&self.params);
        let v = self.embed_step_var(&mut f, t)?;
        let e = self.config.diffusion_embed_dim;
        f.value(v).clone().reshape(vec![e])
    }

    pub fn embed_input_var(&self, f: &mut Forward<'_>, x: Var, which: InputKind) -> Result<Var> {
        let (proj, stack) = match which {
            InputKind::Noisy => (&self.arch.input_proj, &self.arch.input_smm),
            InputKind::Condition => (&self.arch.cond_proj, &self.arch.cond_smm),
        };
        let mut h = proj.forward(f, x)?;
        for s in stack {
            h = s.forward(f, h)?;
        }
        Ok(h)
    }

    /// Embeds `x: [K', L]` (`2K` rows for [`InputKind::Noisy`]) to `[C, L]`.
    pub fn embed_input(&self, x: &Tensor, which: InputKind) -> Result<Tensor> {
        let mut f = Forward::new(&self.params);
        let xv = f.input(x.clone());
        let y = self.embed_input_var(&mut f, xv, which)?;
        Ok(f.value(y).clone())
    }

    fn check_inputs(&self, x_t: &Tensor, x_cond: &Tensor, cond_mask: &Tensor) -> Result<()> {
        let want = [self.shape.channels, self.shape.length];
        for (name, t) in [("X_t", x_t), ("X_cond", x_cond), ("cond_mask", cond_mask)] {
            if t.shape() != want {
                return Err(Error::dim(format!("{name} has shape {:?}, network expects {:?}", t.shape(), want)));
            }
        }
        Ok(())
    }

    /// Records the full network on `f` and returns the `[K, L]` prediction.
    pub fn forward(&self, f: &mut Forward<'_>, x_t: &Tensor, x_cond: &Tensor, cond_mask: &Tensor, t: usize) -> Result<Var> {
        self.check_inputs(x_t, x_cond, cond_mask)?;
        let l = self.shape.length;
        let xt = f.input(x_t.clone());
        let mask = f.input(cond_mask.clone());
        let noisy = f.g.concat_rows(&[xt, mask])?;
        let h1 = self.embed_input_var(f, noisy, InputKind::Noisy)?;
        let step = self.embed_step_var(f, t)?;
        let step = f.g.broadcast_cols(step, l);
        let merged = f.g.concat_rows(&[h1, step])?;
        let mut h = self.arch.step_fuse.forward(f, merged)?;
        for s in &self.arch.seq1 {
            h = s.forward(f, h)?;
        }
        let xc = f.input(x_cond.clone());
        let cond = self.embed_input_var(f, xc, InputKind::Condition)?;
        let merged = f.g.concat_rows(&[h, cond])?;
        let mut h = self.arch.cond_fuse.forward(f, merged)?;
        for s in &self.arch.seq2 {
            h = s.forward(f, h)?;
        }
        self.arch.out_proj.forward(f, h)
    }

    pub fn predict_noise(&self, x_t: &Tensor, x_cond: &Tensor, cond_mask: &Tensor, t: usize) -> Result<Tensor> {
        let mut f = Forward::inference(&self.params);
        let y = self.forward(&mut f, x_t, x_cond, cond_mask, t)?;
        Ok(f.value(y).clone())
    }
}
