//! Flat `key = value` run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;

use crate::blocks::BlockConfig;
use crate::data::{SyntheticKind, SyntheticSpec};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::masking::{MaskConfig, MaskStrategy};
use crate::numerics::Tensor;
use crate::ssm::SsmConfig;
use crate::trainer::{AdamConfig, TrainConfig};

pub struct KeySpec {
    pub key: &'static str,
    /// `None` means unset unless given.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(key: &'static str, default: Option<&'static str>, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

/// Every recognised key.
pub const KEYS: &[KeySpec] = &[
    key("seed", Some("0"), "master seed for initialization, masking, noise and sampling"),
    key("parallel", Some("true"), "run per-example work on the rayon pool"),
    key("data.path", None, "input CSV with header time,<ch1>,...,<chK>"),
    key("data.time_column", Some("time"), "name of the timestamp column"),
    key("data.window_len", Some("100"), "window length L"),
    key("data.stride", None, "window stride (defaults to the window length)"),
    key("data.split_seed", Some("0"), "seed of the train/valid/test window shuffle"),
    key("data.valid_frac", Some("0.1"), "fraction of windows held out for validation"),
    key("data.test_frac", Some("0.1"), "fraction of windows held out for testing"),
    key("model.seq_dim", Some("128"), "hidden width C"),
    key(
        "model.residual_channels",
        Some("128"),
        "width setting the PNM inner size (times model.expand)",
    ),
    key("model.diffusion_embed_dim", Some("128"), "diffusion-step embedding width"),
    key("model.n_cond_smm", Some("1"), "SMM modules on the condition path"),
    key("model.n_input_smm", Some("1"), "SMM modules on the noisy-input path"),
    key("model.n_seq_smm", Some("1"), "SMM modules in each sequence stage"),
    key("model.smm_depth", Some("1"), "BAM/CMB pairs per SMM"),
    key("model.direction", Some("bidirectional"), "forward, backward or bidirectional"),
    key("model.temporal_attention", Some("true"), "enable temporal attention inside BAM"),
    key("model.attention_placement", Some("per_branch"), "per_branch or shared"),
    key("model.channel_module", Some("cmb"), "cmb, none or channel_attention"),
    key("model.state_dim", Some("16"), "SSM state dimension N"),
    key("model.expand", Some("2"), "PNM expansion factor"),
    key("model.conv_width", Some("4"), "depthwise convolution width"),
    key("model.skip", Some("true"), "learnable D skip inside the scan"),
    key("model.dt_min", Some("0.01"), "lower end of the initial step size range"),
    key("model.dt_max", Some("0.1"), "upper end of the initial step size range"),
    key("diffusion.T", Some("50"), "number of diffusion steps"),
    key("diffusion.beta_start", Some("0.0001"), "first noise level"),
    key("diffusion.beta_end", Some("0.5"), "last noise level"),
    key("diffusion.kind", Some("quadratic"), "linear or quadratic schedule"),
    key(
        "mask.strategy",
        Some("mixture"),
        "mixture, random, pattern_mimic, block or forecast",
    ),
    key(
        "mask.ratio",
        Some("uniform"),
        "random-mask ratio in [0, 1], or `uniform` for U[0.1, 0.9]",
    ),
    key("mask.block_len", Some("5,15"), "block length range `min,max`"),
    key("mask.n_blocks", Some("1"), "blocks per channel"),
    key("mask.horizon", Some("1"), "forecast horizon"),
    key("mask.mix_weight", Some("0.5"), "probability of pattern mimicry under mixture"),
    key("train.iterations", Some("150000"), "optimization steps"),
    key("train.batch_size", Some("16"), "windows per step"),
    key("train.lr", Some("0.0002"), "Adam learning rate"),
    key("train.beta1", Some("0.9"), "Adam first-moment decay"),
    key("train.beta2", Some("0.999"), "Adam second-moment decay"),
    key("train.eps", Some("1e-8"), "Adam epsilon"),
    key("train.clip_norm", Some("1.0"), "global gradient-norm clip"),
    key("train.validation_every", Some("1000"), "steps between validation passes"),
    key("train.validation_size", Some("64"), "fixed validation examples"),
    key("train.checkpoint", Some("checkpoint.ssdts"), "checkpoint output path"),
    key("train.loss_curve", Some("loss_curve.csv"), "loss curve output path"),
    key("synth.kind", Some("sinusoid_mixture"), "sinusoid_mixture or coupled_oscillator"),
    key("synth.k", Some("4"), "channels K"),
    key("synth.l", Some("100"), "timesteps per window L"),
    key("synth.windows", Some("1"), "number of windows"),
    key("synth.noise_std", Some("0.05"), "observation noise standard deviation"),
    key("synth.damping", Some("0.05"), "oscillator damping"),
    key(
        "synth.coupling",
        Some("0"),
        "oscillator coupling strength between neighbouring channels",
    ),
    key("synth.sample_dt", Some("0.1"), "oscillator time between samples"),
    key("synth.out", Some("synth.csv"), "output CSV path"),
    key("impute.checkpoint", Some("checkpoint.ssdts"), "trained checkpoint"),
    key("impute.data", None, "CSV to impute (defaults to data.path)"),
    key("impute.num_samples", Some("100"), "posterior samples per window"),
    key("impute.out", Some("imputed.csv"), "filled-in CSV path"),
    key("impute.bands", Some("bands.csv"), "quantile-band CSV path"),
    key("evaluate.checkpoint", Some("checkpoint.ssdts"), "trained checkpoint"),
    key("evaluate.data", None, "CSV with ground truth (defaults to data.path)"),
    key("evaluate.split", Some("all"), "windows to score: all or test"),
    key("evaluate.strategy", Some("random"), "evaluation mask: random, block or forecast"),
    key("evaluate.ratio", Some("0.1"), "fraction of observed entries held out"),
    key("evaluate.block_len", Some("5,15"), "block length range for block masks"),
    key("evaluate.n_blocks", Some("1"), "blocks per channel for block masks"),
    key("evaluate.horizon", Some("1"), "horizon for forecast masks"),
    key("evaluate.num_samples", Some("100"), "posterior samples per window"),
    key("evaluate.out", None, "metric JSON path (stdout when unset)"),
    key(
        "evaluate.oracle",
        Some("false"),
        "test hook: score the ground truth instead of model samples",
    ),
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == name)
}

/// Resolved key/value pairs. Only registered keys can be stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// A configuration with nothing set; getters fall back to defaults.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if key_spec(key).is_none() {
            return Err(Error::config(key, "unknown configuration key"));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Result<Self> {
        self.set(key, value.to_string())?;
        Ok(self)
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_str(&text)
    }

    /// Explicit value, else the registered default.
    pub fn raw(&self, key: &str) -> Option<&str> {
        let spec = key_spec(key).unwrap_or_else(|| panic!("unregistered key `{key}`"));
        self.values.get(key).map(String::as_str).or(spec.default)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| Error::config(key, "is required"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| Error::config(key, format!("invalid value `{raw}`: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    /// Parses snake_case enum names through their serde representation.
    pub fn get_enum<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        serde_json::from_value(serde_json::Value::String(raw.to_string()))
            .map_err(|_| Error::config(key, format!("unrecognised value `{raw}`")))
    }

    fn range(&self, key: &str) -> Result<(usize, usize)> {
        let raw = self.require(key)?;
        let bad = || Error::config(key, format!("expected `min,max`, found `{raw}`"));
        let (a, b) = raw.split_once(',').ok_or_else(bad)?;
        Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let cfg = DenoiserConfig {
            seq_dim: self.get("model.seq_dim")?,
            residual_channels: self.get("model.residual_channels")?,
            diffusion_embed_dim: self.get("model.diffusion_embed_dim")?,
            n_cond_smm: self.get("model.n_cond_smm")?,
            n_input_smm: self.get("model.n_input_smm")?,
            n_seq_smm: self.get("model.n_seq_smm")?,
            block: BlockConfig {
                direction: self.get_enum("model.direction")?,
                temporal_attention: self.get("model.temporal_attention")?,
                channel_module: self.get_enum("model.channel_module")?,
                smm_depth: self.get("model.smm_depth")?,
                attention_placement: self.get_enum("model.attention_placement")?,
            },
            ssm: SsmConfig {
                state_dim: self.get("model.state_dim")?,
                expand: self.get("model.expand")?,
                conv_width: self.get("model.conv_width")?,
                skip: self.get("model.skip")?,
                dt_min: self.get("model.dt_min")?,
                dt_max: self.get("model.dt_max")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        let cfg = ScheduleConfig {
            steps: self.get("diffusion.T")?,
            beta_start: self.get("diffusion.beta_start")?,
            beta_end: self.get("diffusion.beta_end")?,
            kind: self.get_enum("diffusion.kind")?,
        };
        if cfg.steps == 0 {
            return Err(Error::config("diffusion.T", "must be ≥ 1"));
        }
        for (key, b) in [("diffusion.beta_start", cfg.beta_start), ("diffusion.beta_end", cfg.beta_end)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(key, "must lie in (0, 1)"));
            }
        }
        cfg.build().map_err(|e| match e {
            Error::Domain(m) => Error::config("diffusion.beta_end", m),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn mask(&self) -> Result<MaskConfig> {
        let ratio = match self.require("mask.ratio")? {
            "uniform" => None,
            _ => Some(self.get("mask.ratio")?),
        };
        let cfg = MaskConfig {
            strategy: self.get_enum("mask.strategy")?,
            ratio,
            block_len: self.range("mask.block_len")?,
            n_blocks: self.get("mask.n_blocks")?,
            horizon: self.get("mask.horizon")?,
            mix_weight: self.get("mask.mix_weight")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The held-out entry policy for evaluation.
    pub fn eval_mask(&self) -> Result<MaskConfig> {
        let strategy: MaskStrategy = self.get_enum("evaluate.strategy")?;
        if !matches!(strategy, MaskStrategy::Random | MaskStrategy::Block | MaskStrategy::Forecast) {
            return Err(Error::config("evaluate.strategy", "must be random, block or forecast"));
        }
        let cfg = MaskConfig {
            strategy,
            ratio: Some(self.get("evaluate.ratio")?),
            block_len: self.range("evaluate.block_len")?,
            n_blocks: self.get("evaluate.n_blocks")?,
            horizon: self.get("evaluate.horizon")?,
            mix_weight: 0.0,
        };
        cfg.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(key.replace("mask.", "evaluate."), message),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            iterations: self.get("train.iterations")?,
            batch_size: self.get("train.batch_size")?,
            adam: AdamConfig {
                lr: self.get("train.lr")?,
                beta1: self.get("train.beta1")?,
                beta2: self.get("train.beta2")?,
                eps: self.get("train.eps")?,
            },
            validation_every: self.get("train.validation_every")?,
            validation_size: self.get("train.validation_size")?,
            clip_norm: self.get("train.clip_norm")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth(&self) -> Result<SyntheticSpec> {
        let channels: usize = self.get("synth.k")?;
        let coupling: f64 = self.get("synth.coupling")?;
        let kind: SyntheticKind = self.get_enum("synth.kind")?;
        let coupling =
            (coupling != 0.0).then(|| Tensor::from_fn(&[channels, channels], |ix| if ix[0].abs_diff(ix[1]) == 1 { coupling } else { 0.0 }));
        let spec = SyntheticSpec {
            kind,
            channels,
            length: self.get("synth.l")?,
            windows: self.get("synth.windows")?,
            coupling,
            damping: self.get("synth.damping")?,
            noise_std: self.get("synth.noise_std")?,
            seed: self.seed()?,
            sample_dt: self.get("synth.sample_dt")?,
        };
        spec.validate()?;
        if spec.windows == 0 {
            return Err(Error::config("synth.windows", "must be ≥ 1"));
        }
        Ok(spec)
    }

    pub fn window(&self) -> Result<(usize, usize)> {
        let len: usize = self.get("data.window_len")?;
        if len == 0 {
            return Err(Error::config("data.window_len", "must be ≥ 1"));
        }
        let stride = self.get_opt("data.stride")?.unwrap_or(len);
        if stride == 0 {
            return Err(Error::config("data.stride", "must be ≥ 1"));
        }
        Ok((len, stride))
    }
}
