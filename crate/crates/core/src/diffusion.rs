//! Conditional DDPM: variance schedule, forward noising, the masked
//! noise-prediction objective and ancestral sampling.
//!
//! Steps are 1-based (`t = 1..=T`) everywhere in the public API.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::masking::{TimeSeries, TrainingBatch};
use crate::metrics::{crps_levels, empirical_quantile};
use crate::numerics::Tensor;
use crate::params::Forward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.5,
            kind: ScheduleKind::Quadratic,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Per-step tables; index `t − 1` holds step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::domain("diffusion needs T ≥ 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::domain(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let frac = |i: usize| if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
    let beta: Vec<f64> = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + frac(i) * (beta_end - beta_start),
            ScheduleKind::Quadratic => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                let s = a + frac(i) * (b - a);
                s * s
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::domain(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    let i = sched.check(t)?;
    let (a, b) = (sched.alpha_bar[i].sqrt(), (1.0 - sched.alpha_bar[i]).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Anything that can stand in for `ε_θ`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x_t: &Tensor, x_cond: &Tensor, cond_mask: &Tensor, t: usize) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, x_cond: &Tensor, cond_mask: &Tensor, t: usize) -> Result<Tensor> {
        Denoiser::predict_noise(self, x_t, x_cond, cond_mask, t)
    }
}

/// Predicts zero noise everywhere.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, x_t: &Tensor, _: &Tensor, _: &Tensor, _: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Diffusion step and target-entry noise for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    /// Standard normal at target entries, zero elsewhere.
    pub eps: Tensor,
}

pub fn draw_noise(batch: &TrainingBatch, sched: &DiffusionSchedule, rng: &mut impl Rng) -> NoiseDraw {
    let t = rng.random_range(1..=sched.steps());
    let eps = standard_normal(batch.x0.shape(), rng)
        .zip_map(&batch.target_mask, |e, m| e * m)
        .expect("same shape");
    NoiseDraw { t, eps }
}

/// Noisy network input: forward-noised targets, zeros elsewhere.
pub fn noisy_input(batch: &TrainingBatch, draw: &NoiseDraw, sched: &DiffusionSchedule) -> Result<Tensor> {
    forward_noise(&batch.x0, draw.t, &draw.eps, sched)?.zip_map(&batch.target_mask, |x, m| x * m)
}

fn masked_mse(pred: &Tensor, eps: &Tensor, mask: &Tensor) -> Result<f64> {
    let n = mask.sum();
    if n <= 0.0 {
        return Err(Error::DegenerateBatch("no target entries".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(eps.data())
        .zip(mask.data())
        .map(|((p, e), m)| m * (e - p) * (e - p))
        .sum();
    Ok(s / n)
}

/// Masked noise-prediction loss for a fixed step and noise draw.
pub fn training_loss(batch: &TrainingBatch, draw: &NoiseDraw, predictor: &impl NoisePredictor, sched: &DiffusionSchedule) -> Result<f64> {
    if batch.target_mask.sum() <= 0.0 {
        return Err(Error::DegenerateBatch("no target entries".into()));
    }
    let x_t = noisy_input(batch, draw, sched)?;
    let pred = predictor.predict_noise(&x_t, &batch.x_cond, &batch.cond_mask, draw.t)?;
    masked_mse(&pred, &draw.eps, &batch.target_mask)
}

/// Draws `t` and `ε` from `rng` and returns the masked loss.
pub fn training_step(batch: &TrainingBatch, predictor: &impl NoisePredictor, sched: &DiffusionSchedule, rng: &mut impl Rng) -> Result<f64> {
    if batch.target_mask.sum() <= 0.0 {
        return Err(Error::DegenerateBatch("no target entries".into()));
    }
    let draw = draw_noise(batch, sched, rng);
    training_loss(batch, &draw, predictor, sched)
}

/// Loss and parameter gradients of one example.
pub fn loss_and_grads(model: &Denoiser, batch: &TrainingBatch, draw: &NoiseDraw, sched: &DiffusionSchedule) -> Result<(f64, Vec<Tensor>)> {
    let x_t = noisy_input(batch, draw, sched)?;
    let mut f = Forward::new(&model.params);
    let pred = model.forward(&mut f, &x_t, &batch.x_cond, &batch.cond_mask, draw.t)?;
    let loss = f.g.masked_mean_sq(pred, &draw.eps, &batch.target_mask)?;
    let value = f.value(loss).data()[0];
    Ok((value, f.param_grads(loss)?))
}

/// Mean loss and mean gradients over a batch, evaluated with `exec`.
/// The reduction runs in batch order.
pub fn batch_loss_and_grads(
    model: &Denoiser,
    examples: &[(TrainingBatch, NoiseDraw)],
    sched: &DiffusionSchedule,
    exec: Execution,
) -> Result<(f64, Vec<Tensor>)> {
    if examples.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let parts = exec.try_map(examples, |(b, d)| loss_and_grads(model, b, d, sched))?;
    let scale = 1.0 / parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss * scale, grads))
}

fn check_masks(x_cond: &Tensor, cond_mask: &Tensor, target_mask: &Tensor) -> Result<()> {
    x_cond.expect_same_shape(cond_mask)?;
    x_cond.expect_same_shape(target_mask)?;
    if cond_mask.data().iter().zip(target_mask.data()).any(|(&c, &t)| c != 0.0 && t != 0.0) {
        return Err(Error::domain("condition and target masks overlap"));
    }
    Ok(())
}

/// Runs the reverse chain from `x_start` (read at target entries) down to
/// step 1. Observed entries carry `x_cond`, entries in neither mask are 0.
pub fn reverse_chain(
    x_start: &Tensor,
    x_cond: &Tensor,
    cond_mask: &Tensor,
    target_mask: &Tensor,
    predictor: &impl NoisePredictor,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    check_masks(x_cond, cond_mask, target_mask)?;
    x_start.expect_same_shape(x_cond)?;
    let mut x = x_start.zip_map(target_mask, |v, m| v * m)?;
    for t in (1..=sched.steps()).rev() {
        let i = t - 1;
        let eps = predictor.predict_noise(&x, x_cond, cond_mask, t)?;
        let coef = sched.beta[i] / (1.0 - sched.alpha_bar[i]).sqrt();
        let inv = 1.0 / sched.alpha[i].sqrt();
        let noise = if t > 1 { Some(standard_normal(x.shape(), rng)) } else { None };
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            if target_mask.data()[j] == 0.0 {
                continue;
            }
            let mut next = inv * (*v - coef * eps.data()[j]);
            if let Some(z) = &noise {
                next += sched.sigma[i] * z.data()[j];
            }
            *v = next;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampling diverged at step {t}")));
        }
    }
    let out = x
        .data()
        .iter()
        .zip(x_cond.data())
        .zip(cond_mask.data())
        .map(|((&v, &c), &m)| if m != 0.0 { c } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

/// `num_samples` independent draws `[S, K, L]`. Each sample gets its own
/// seed from `rng` before any work starts, so the result does not depend
/// on `exec`.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    x_cond: &Tensor,
    cond_mask: &Tensor,
    target_mask: &Tensor,
    predictor: &impl NoisePredictor,
    sched: &DiffusionSchedule,
    num_samples: usize,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<Tensor> {
    if num_samples == 0 {
        return Err(Error::domain("num_samples must be ≥ 1"));
    }
    check_masks(x_cond, cond_mask, target_mask)?;
    let seeds: Vec<u64> = (0..num_samples).map(|_| rng.random()).collect();
    let draws = exec.try_map(&seeds, |&seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let start = standard_normal(x_cond.shape(), &mut r);
        reverse_chain(&start, x_cond, cond_mask, target_mask, predictor, sched, &mut r)
    })?;
    Tensor::stack(&draws)
}

/// Imputation of one series: samples at missing entries plus summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationResult {
    /// `[S, K, L]`; `S = 0` when nothing was missing.
    pub samples: Tensor,
    pub mean: Tensor,
    /// One `[K, L]` tensor per level of [`crps_levels`].
    pub quantiles: Vec<Tensor>,
    pub target_mask: Tensor,
}

impl ImputationResult {
    pub fn num_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    /// Empirical quantile at an arbitrary level; observed entries return
    /// the observation.
    pub fn quantile(&self, level: f64) -> Tensor {
        if self.num_samples() == 0 {
            return self.mean.clone();
        }
        summarize(&self.samples, &[level]).1.remove(0)
    }
}

/// Per-entry mean and quantiles of `samples: [S, K, L]`.
fn summarize(samples: &Tensor, levels: &[f64]) -> (Tensor, Vec<Tensor>) {
    let (s, k, l) = samples.dims3().expect("3-D samples");
    let mut mean = Tensor::zeros(&[k, l]);
    let mut qs: Vec<Tensor> = levels.iter().map(|_| Tensor::zeros(&[k, l])).collect();
    let mut column = vec![0.0; s];
    for i in 0..k * l {
        for (j, c) in column.iter_mut().enumerate() {
            *c = samples.data()[j * k * l + i];
        }
        mean.data_mut()[i] = column.iter().sum::<f64>() / s as f64;
        column.sort_by(f64::total_cmp);
        for (q, &a) in qs.iter_mut().zip(levels) {
            q.data_mut()[i] = empirical_quantile(&column, a);
        }
    }
    (mean, qs)
}

/// Imputes every missing entry of `series` conditioned on all observations.
pub fn impute(
    series: &TimeSeries,
    predictor: &impl NoisePredictor,
    sched: &DiffusionSchedule,
    num_samples: usize,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<ImputationResult> {
    let (k, l) = (series.channels(), series.len());
    let target_mask = series.missing.clone();
    if series.n_missing() == 0 {
        return Ok(ImputationResult {
            samples: Tensor::zeros(&[0, k, l]),
            mean: series.values.clone(),
            quantiles: crps_levels().iter().map(|_| series.values.clone()).collect(),
            target_mask,
        });
    }
    let cond_mask = series.observed_mask();
    let x_cond = series.values.zip_map(&cond_mask, |v, m| v * m)?;
    let samples = sample(&x_cond, &cond_mask, &target_mask, predictor, sched, num_samples, rng, exec)?;
    let (mut mean, mut quantiles) = summarize(&samples, &crps_levels());
    // Averages of identical observed values can drift in the last bit.
    for t in std::iter::once(&mut mean).chain(quantiles.iter_mut()) {
        for ((v, &c), &m) in t.data_mut().iter_mut().zip(x_cond.data()).zip(cond_mask.data()) {
            if m != 0.0 {
                *v = c;
            }
        }
    }
    Ok(ImputationResult {
        samples,
        mean,
        quantiles,
        target_mask,
    })
}
