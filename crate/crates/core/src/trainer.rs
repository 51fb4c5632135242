//! Adam optimization of the denoiser under self-supervised masking, with
//! validation-driven checkpoint selection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::Denoiser;
use crate::diffusion::{batch_loss_and_grads, draw_noise, training_loss, DiffusionSchedule, NoiseDraw};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::masking::{split_condition_target, MaskConfig, TrainingBatch};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update. A non-finite gradient leaves parameters and
/// state untouched and returns [`Error::NonFinite`].
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("gradient list does not match parameters"));
    }
    for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::dim(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` is not finite",
                params.name(params.ids().nth(i).expect("index in range"))
            )));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub validation_every: usize,
    /// Number of fixed (window, mask, noise) validation examples.
    pub validation_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 150_000,
            batch_size: 16,
            adam: AdamConfig::default(),
            validation_every: 1000,
            validation_size: 64,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("train.batch_size", self.batch_size),
            ("train.validation_every", self.validation_every),
            ("train.validation_size", self.validation_size),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be ≥ 1"));
            }
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be > 0"));
        }
        Ok(())
    }
}

/// One optimization step's worth of state.
pub struct Trainer {
    pub model: Denoiser,
    pub optimizer: AdamState,
    pub clip_norm: f64,
    pub exec: Execution,
}

impl Trainer {
    pub fn new(model: Denoiser, config: &TrainConfig, exec: Execution) -> Self {
        let optimizer = AdamState::new(&model.params, config.adam);
        Self {
            model,
            optimizer,
            clip_norm: config.clip_norm,
            exec,
        }
    }

    /// Mean loss over `examples` at the current parameters, then one
    /// clipped Adam update.
    pub fn step(&mut self, examples: &[(TrainingBatch, NoiseDraw)], sched: &DiffusionSchedule) -> Result<f64> {
        let (loss, mut grads) = batch_loss_and_grads(&self.model, examples, sched, self.exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {loss}")));
        }
        clip_global_norm(&mut grads, self.clip_norm);
        adam_step(&mut self.model.params, &grads, &mut self.optimizer)?;
        Ok(loss)
    }
}

/// Draws a masked example from window `index` of `data`, retrying until the
/// plan has at least one target.
pub fn draw_example(
    data: &Dataset,
    index: usize,
    mask: &MaskConfig,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<(TrainingBatch, NoiseDraw)> {
    let series = &data.windows[index];
    let missing_ratio = data.missing_ratio();
    for _ in 0..16 {
        let donor = if data.len() > 1 {
            let mut j = rng.random_range(0..data.len() - 1);
            if j >= index {
                j += 1;
            }
            Some(&data.windows[j].missing)
        } else {
            None
        };
        let plan = mask.draw(series, donor, missing_ratio, rng)?;
        if plan.n_targets() > 0 {
            let batch = split_condition_target(series, &plan)?;
            let draw = draw_noise(&batch, sched, rng);
            return Ok((batch, draw));
        }
    }
    Err(Error::DegenerateBatch(format!(
        "window {index} produced no training targets under the mask policy"
    )))
}

/// Fixed validation examples drawn from their own seeded stream.
pub fn validation_set(
    data: &Dataset,
    count: usize,
    mask: &MaskConfig,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<(TrainingBatch, NoiseDraw)>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0a11d);
    (0..count)
        .map(|i| draw_example(data, i % data.len(), mask, sched, &mut rng))
        .collect()
}

pub fn validation_loss(
    model: &Denoiser,
    examples: &[(TrainingBatch, NoiseDraw)],
    sched: &DiffusionSchedule,
    exec: Execution,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::DegenerateBatch("empty validation set".into()));
    }
    let losses = exec.try_map(examples, |(b, d)| training_loss(b, d, model, sched))?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss or gradient stopped training early.
    Aborted {
        step: usize,
    },
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub best: Denoiser,
    pub best_step: usize,
    pub best_valid_loss: f64,
    /// Optimizer state at the end of the run.
    pub optimizer: AdamState,
    pub curve: Vec<LossRecord>,
    pub status: TrainStatus,
}

/// Runs `config.iterations` steps on `train` (already normalized),
/// validating on `valid` every `validation_every` steps, at step 0 and at
/// the last step. An empty `valid` validates on `train`.
pub fn train(
    model: Denoiser,
    train: &Dataset,
    valid: &Dataset,
    sched: &DiffusionSchedule,
    mask: &MaskConfig,
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    config.validate()?;
    mask.validate()?;
    if train.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let valid_src = if valid.is_empty() { train } else { valid };
    let valid_set = validation_set(valid_src, config.validation_size, mask, sched, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(model, config, exec);
    let initial = validation_loss(&trainer.model, &valid_set, sched, exec)?;
    let mut curve = vec![LossRecord {
        step: 0,
        train_loss: None,
        valid_loss: Some(initial),
    }];
    let mut best = (trainer.model.clone(), 0, initial);
    let mut status = TrainStatus::Completed;
    for step in 1..=config.iterations {
        let examples = (0..config.batch_size)
            .map(|_| {
                let i = rng.random_range(0..train.len());
                draw_example(train, i, mask, sched, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = match trainer.step(&examples, sched) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => {
                status = TrainStatus::Aborted { step };
                break;
            }
            Err(e) => return Err(e),
        };
        let mut record = LossRecord {
            step,
            train_loss: Some(loss),
            valid_loss: None,
        };
        if step % config.validation_every == 0 || step == config.iterations {
            let v = validation_loss(&trainer.model, &valid_set, sched, exec)?;
            if !v.is_finite() {
                curve.push(record);
                status = TrainStatus::Aborted { step };
                break;
            }
            record.valid_loss = Some(v);
            if v < best.2 {
                best = (trainer.model.clone(), step, v);
            }
        }
        curve.push(record);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_step: best.1,
        best_valid_loss: best.2,
        optimizer: trainer.optimizer,
        curve,
        status,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from("step,train_loss,valid_loss\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.step, fmt_opt(r.train_loss), fmt_opt(r.valid_loss)));
    }
    out
}

pub fn write_loss_curve(curve: &[LossRecord], path: &Path) -> Result<()> {
    std::fs::write(path, loss_curve_csv(curve)).map_err(|e| Error::io(path, e))
}
