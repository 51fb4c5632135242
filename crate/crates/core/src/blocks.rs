//! Composite blocks of the denoiser: temporal attention, the bidirectional
//! attention Mamba (BAM) block, the channel Mamba block (CMB) and the
//! sequential Mamba module (SMM) that stacks them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv1d, FeatureLayerNorm, Linear};
use crate::numerics::{Padding, Tensor, Var};
use crate::params::{Forward, ParamBuilder, ParamStore};
use crate::ssm::{PnmBlock, SsmConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelModule {
    Cmb,
    None,
    ChannelAttention,
}

/// Where temporal attention sits inside a BAM block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPlacement {
    /// One module per direction, applied before the branches are summed.
    PerBranch,
    /// A single module applied to the summed branches.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub direction: Direction,
    pub temporal_attention: bool,
    pub channel_module: ChannelModule,
    pub smm_depth: usize,
    pub attention_placement: AttentionPlacement,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            direction: Direction::Bidirectional,
            temporal_attention: true,
            channel_module: ChannelModule::Cmb,
            smm_depth: 1,
            attention_placement: AttentionPlacement::PerBranch,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smm_depth == 0 {
            return Err(Error::config("model.smm_depth", "must be ≥ 1"));
        }
        Ok(())
    }

    /// The eight configurations of the ablation table, full model first.
    pub fn ablation_grid() -> Vec<BlockConfig> {
        use ChannelModule as Ch;
        use Direction as D;
        [
            (D::Bidirectional, true, Ch::Cmb),
            (D::Forward, true, Ch::Cmb),
            (D::Forward, true, Ch::None),
            (D::Backward, true, Ch::Cmb),
            (D::Backward, true, Ch::None),
            (D::Bidirectional, true, Ch::None),
            (D::Bidirectional, false, Ch::Cmb),
            (D::Bidirectional, true, Ch::ChannelAttention),
        ]
        .into_iter()
        .map(|(direction, temporal_attention, channel_module)| BlockConfig {
            direction,
            temporal_attention,
            channel_module,
            ..BlockConfig::default()
        })
        .collect()
    }
}

/// `y = sigmoid(conv(x)) ⊙ x`.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub conv: Conv1d,
}

impl TemporalAttention {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, channels: usize, width: usize) -> Result<Self> {
        let mut p = p.scope(name);
        Ok(Self {
            conv: Conv1d::new(&mut p, "conv", channels, width, Padding::Same)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let logits = self.conv.forward(f, x)?;
        let w = f.g.sigmoid(logits);
        f.g.mul(w, x)
    }
}

pub fn temporal_attention(x: &Tensor, att: &TemporalAttention, store: &ParamStore) -> Result<Tensor> {
    eval(store, x, |f, v| att.forward(f, v))
}

/// One direction of a BAM block: conv, PNM, optional attention.
#[derive(Clone, Debug)]
pub struct BamBranch {
    pub conv: Conv1d,
    pub pnm: PnmBlock,
    pub attention: Option<TemporalAttention>,
}

impl BamBranch {
    fn new(p: &mut ParamBuilder<'_>, name: &str, width: usize, inner: usize, attention: bool, ssm: &SsmConfig) -> Result<Self> {
        let mut p = p.scope(name);
        Ok(Self {
            conv: Conv1d::new(&mut p, "conv", width, ssm.conv_width, Padding::Causal)?,
            pnm: PnmBlock::new(&mut p, "pnm", width, inner, ssm)?,
            attention: if attention {
                Some(TemporalAttention::new(&mut p, "attention", width, ssm.conv_width)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, f: &mut Forward<'_>, u: Var) -> Result<Var> {
        let h = self.conv.forward(f, u)?;
        let h = self.pnm.forward(f, h)?;
        match &self.attention {
            Some(att) => att.forward(f, h),
            None => Ok(h),
        }
    }
}

/// Bidirectional attention Mamba block over `[C, L]`.
///
/// `y = x + fwd(LN(x)) + flip(bwd(flip(LN(x))))`; the backward branch runs
/// entirely in reversed time, including its attention.
#[derive(Clone, Debug)]
pub struct BamBlock {
    pub norm: FeatureLayerNorm,
    pub forward: Option<BamBranch>,
    pub backward: Option<BamBranch>,
    pub shared_attention: Option<TemporalAttention>,
}

impl BamBlock {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, width: usize, inner: usize, cfg: &BlockConfig, ssm: &SsmConfig) -> Result<Self> {
        let mut p = p.scope(name);
        let per_branch = cfg.temporal_attention && cfg.attention_placement == AttentionPlacement::PerBranch;
        let shared = cfg.temporal_attention && cfg.attention_placement == AttentionPlacement::Shared;
        let norm = FeatureLayerNorm::new(&mut p, "norm", width)?;
        let forward = match cfg.direction {
            Direction::Forward | Direction::Bidirectional => Some(BamBranch::new(&mut p, "forward", width, inner, per_branch, ssm)?),
            Direction::Backward => None,
        };
        let backward = match cfg.direction {
            Direction::Backward | Direction::Bidirectional => Some(BamBranch::new(&mut p, "backward", width, inner, per_branch, ssm)?),
            Direction::Forward => None,
        };
        let shared_attention = if shared {
            Some(TemporalAttention::new(&mut p, "attention", width, ssm.conv_width)?)
        } else {
            None
        };
        Ok(Self {
            norm,
            forward,
            backward,
            shared_attention,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let u = self.norm.forward(f, x)?;
        let mut sum: Option<Var> = None;
        if let Some(branch) = &self.forward {
            sum = Some(branch.forward(f, u)?);
        }
        if let Some(branch) = &self.backward {
            let ur = f.g.flip_last(u);
            let r = branch.forward(f, ur)?;
            let r = f.g.flip_last(r);
            sum = Some(match sum {
                Some(s) => f.g.add(s, r)?,
                None => r,
            });
        }
        let Some(mut sum) = sum else {
            return Ok(x);
        };
        if let Some(att) = &self.shared_attention {
            sum = att.forward(f, sum)?;
        }
        f.g.add(x, sum)
    }
}

pub fn bam_block(x: &Tensor, block: &BamBlock, store: &ParamStore) -> Result<Tensor> {
    eval(store, x, |f, v| block.forward(f, v))
}

/// Channel Mamba block: scans the channel axis of `[C, L]` in stored order.
#[derive(Clone, Debug)]
pub struct CmbBlock {
    pub path_conv: Conv1d,
    pub pnm: PnmBlock,
    pub gate_conv: Conv1d,
}

impl CmbBlock {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, seq_len: usize, ssm: &SsmConfig) -> Result<Self> {
        let mut p = p.scope(name);
        Ok(Self {
            path_conv: Conv1d::new(&mut p, "path_conv", seq_len, ssm.conv_width, Padding::Causal)?,
            pnm: PnmBlock::new(&mut p, "pnm", seq_len, ssm.expand * seq_len, ssm)?,
            gate_conv: Conv1d::new(&mut p, "gate_conv", seq_len, ssm.conv_width, Padding::Causal)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let xt = f.g.transpose(x)?;
        let path = self.path_conv.forward(f, xt)?;
        let path = self.pnm.forward(f, path)?;
        let gate = self.gate_conv.forward(f, xt)?;
        let gate = f.g.sigmoid(gate);
        let gated = f.g.mul(gate, path)?;
        let y = f.g.add(xt, gated)?;
        f.g.transpose(y)
    }
}

/// Squeeze-excitation channel gate: `y = x ⊙ 2·sigmoid(W₂ silu(W₁ mean_t(x)))`.
///
/// The factor 2 centres the gate on 1 so zero weights give the identity.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl ChannelAttention {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut p = p.scope(name);
        let hidden = (channels / 4).max(1);
        Ok(Self {
            squeeze: Linear::new(&mut p, "squeeze", channels, hidden, true)?,
            excite: Linear::new(&mut p, "excite", hidden, channels, true)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let pooled = f.g.mean_cols(x)?;
        let h = self.squeeze.forward(f, pooled)?;
        let h = f.g.silu(h);
        let s = self.excite.forward(f, h)?;
        let s = f.g.sigmoid(s);
        let gate = f.g.scale(s, 2.0);
        f.g.mul_col_broadcast(x, gate)
    }
}

/// The inter-channel half of an SMM layer.
#[derive(Clone, Debug)]
pub enum ChannelStage {
    Cmb(CmbBlock),
    Attention(ChannelAttention),
    Identity,
}

impl ChannelStage {
    pub fn new(p: &mut ParamBuilder<'_>, name: &str, channels: usize, seq_len: usize, cfg: &BlockConfig, ssm: &SsmConfig) -> Result<Self> {
        Ok(match cfg.channel_module {
            ChannelModule::Cmb => ChannelStage::Cmb(CmbBlock::new(p, name, seq_len, ssm)?),
            ChannelModule::ChannelAttention => ChannelStage::Attention(ChannelAttention::new(p, name, channels)?),
            ChannelModule::None => ChannelStage::Identity,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        match self {
            ChannelStage::Cmb(b) => b.forward(f, x),
            ChannelStage::Attention(a) => a.forward(f, x),
            ChannelStage::Identity => Ok(x),
        }
    }
}

pub fn cmb_block(x: &Tensor, stage: &ChannelStage, store: &ParamStore) -> Result<Tensor> {
    eval(store, x, |f, v| stage.forward(f, v))
}

/// `smm_depth` repetitions of `[BAM → channel stage]`.
#[derive(Clone, Debug)]
pub struct Smm {
    pub layers: Vec<(BamBlock, ChannelStage)>,
}

impl Smm {
    /// `width` is the feature count `C`, `inner` the PNM inner width of the
    /// BAM branches and `seq_len` the window length `L`.
    pub fn new(
        p: &mut ParamBuilder<'_>,
        name: &str,
        width: usize,
        inner: usize,
        seq_len: usize,
        cfg: &BlockConfig,
        ssm: &SsmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut p = p.scope(name);
        let layers = (0..cfg.smm_depth)
            .map(|i| {
                let mut p = p.scope(&format!("layer{i}"));
                Ok((
                    BamBlock::new(&mut p, "bam", width, inner, cfg, ssm)?,
                    ChannelStage::new(&mut p, "channel", width, seq_len, cfg, ssm)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, f: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        for (bam, channel) in &self.layers {
            x = bam.forward(f, x)?;
            x = channel.forward(f, x)?;
        }
        Ok(x)
    }
}

pub fn smm(x: &Tensor, module: &Smm, store: &ParamStore) -> Result<Tensor> {
    eval(store, x, |f, v| module.forward(f, v))
}

fn eval(store: &ParamStore, x: &Tensor, body: impl FnOnce(&mut Forward<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut f = Forward::new(store);
    let xv = f.input(x.clone());
    let y = body(&mut f, xv)?;
    Ok(f.value(y).clone())
}
