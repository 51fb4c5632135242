//! Time-series containers and the self-supervised masking strategies that
//! split observed entries into conditions and training targets.
//!
//! Masks are `{0, 1}` tensors shaped like the observation matrix.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One window of a multivariate series: `values` and `missing` are `[K, L]`
/// (`missing = 1` flags an absent observation, stored as 0 in `values`).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Tensor,
    pub missing: Tensor,
    pub timestamps: Vec<f64>,
}

impl TimeSeries {
    pub fn new(values: Tensor, missing: Tensor, timestamps: Vec<f64>) -> Result<Self> {
        let (_, l) = values.dims2()?;
        values.expect_same_shape(&missing)?;
        if timestamps.len() != l {
            return Err(Error::dim(format!("{} timestamps for {l} steps", timestamps.len())));
        }
        if missing.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::domain("missing indicator must be 0 or 1"));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::domain("timestamps must be nondecreasing"));
        }
        let mut values = values;
        for (v, &m) in values.data_mut().iter_mut().zip(missing.data()) {
            if m == 1.0 {
                *v = 0.0;
            }
        }
        Ok(Self {
            values,
            missing,
            timestamps,
        })
    }

    /// Fully observed series with timestamps `0, 1, …, L−1`.
    pub fn observed(values: Tensor) -> Result<Self> {
        let (k, l) = values.dims2()?;
        Self::new(values, Tensor::zeros(&[k, l]), (0..l).map(|t| t as f64).collect())
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `1 − M`.
    pub fn observed_mask(&self) -> Tensor {
        self.missing.map(|m| 1.0 - m)
    }

    pub fn n_observed(&self) -> usize {
        self.missing.data().iter().filter(|&&m| m == 0.0).count()
    }

    pub fn n_missing(&self) -> usize {
        self.missing.len() - self.n_observed()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    PatternMimic,
    Block,
    Forecast,
}

/// Targets and conditions for one series.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub cond_mask: Tensor,
    pub target_mask: Tensor,
    pub strategy: Strategy,
    /// Set when pattern mimicry found no overlap and fell back to random
    /// masking at this ratio.
    pub fallback_ratio: Option<f64>,
}

impl MaskPlan {
    fn from_targets(series: &TimeSeries, targets: Vec<bool>, strategy: Strategy) -> Self {
        let obs = series.missing.data();
        let target: Vec<f64> = targets.iter().zip(obs).map(|(&t, &m)| (t && m == 0.0) as u8 as f64).collect();
        let cond: Vec<f64> = target
            .iter()
            .zip(obs)
            .map(|(&t, &m)| ((t == 0.0) && m == 0.0) as u8 as f64)
            .collect();
        let shape = series.values.shape().to_vec();
        Self {
            cond_mask: Tensor::new(shape.clone(), cond).expect("same extent"),
            target_mask: Tensor::new(shape, target).expect("same extent"),
            strategy,
            fallback_ratio: None,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.target_mask.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Checks disjointness and that both masks sit inside the observed set.
    pub fn validate(&self, series: &TimeSeries) -> Result<()> {
        self.cond_mask.expect_same_shape(&series.values)?;
        self.target_mask.expect_same_shape(&series.values)?;
        for ((&c, &t), &m) in self.cond_mask.data().iter().zip(self.target_mask.data()).zip(series.missing.data()) {
            if c != 0.0 && t != 0.0 {
                return Err(Error::domain("condition and target masks overlap"));
            }
            if m != 0.0 && (c != 0.0 || t != 0.0) {
                return Err(Error::domain("mask selects a missing entry"));
            }
        }
        Ok(())
    }
}

fn observed_indices(series: &TimeSeries) -> Vec<usize> {
    series
        .missing
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Exactly `round(ratio × #observed)` observed entries become targets.
pub fn random_mask(series: &TimeSeries, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let obs = observed_indices(series);
    let n = (ratio * obs.len() as f64).round() as usize;
    let mut targets = vec![false; series.values.len()];
    for i in sample(rng, obs.len(), n.min(obs.len())) {
        targets[obs[i]] = true;
    }
    Ok(MaskPlan::from_targets(series, targets, Strategy::Random))
}

/// Targets are the observed entries that are missing in `donor`. An empty
/// overlap falls back to [`random_mask`] at `fallback_ratio`.
pub fn pattern_mimic_mask(series: &TimeSeries, donor: &Tensor, fallback_ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    donor.expect_same_shape(&series.values)?;
    let targets: Vec<bool> = donor
        .data()
        .iter()
        .zip(series.missing.data())
        .map(|(&d, &m)| d != 0.0 && m == 0.0)
        .collect();
    if targets.iter().any(|&t| t) {
        return Ok(MaskPlan::from_targets(series, targets, Strategy::PatternMimic));
    }
    let mut plan = random_mask(series, fallback_ratio, rng)?;
    plan.strategy = Strategy::PatternMimic;
    plan.fallback_ratio = Some(fallback_ratio);
    Ok(plan)
}

/// `n_blocks` intervals with lengths drawn from `block_len = (min, max)` on
/// each chosen channel (all channels when `channels` is `None`).
pub fn block_mask(
    series: &TimeSeries,
    block_len: (usize, usize),
    n_blocks: usize,
    channels: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    let (k, l) = (series.channels(), series.len());
    let (lo, hi) = block_len;
    if lo == 0 || lo > hi || hi > l {
        return Err(Error::domain(format!("block length range ({lo}, {hi}) invalid for L = {l}")));
    }
    let all: Vec<usize> = (0..k).collect();
    let chosen = channels.unwrap_or(&all);
    if let Some(&c) = chosen.iter().find(|&&c| c >= k) {
        return Err(Error::dim(format!("channel {c} out of range for K = {k}")));
    }
    let mut targets = vec![false; k * l];
    for &c in chosen {
        for _ in 0..n_blocks {
            let len = rng.random_range(lo..=hi);
            let start = rng.random_range(0..=l - len);
            targets[c * l + start..c * l + start + len].fill(true);
        }
    }
    Ok(MaskPlan::from_targets(series, targets, Strategy::Block))
}

/// Every channel at the final `horizon` steps becomes a target.
pub fn forecast_mask(series: &TimeSeries, horizon: usize) -> Result<MaskPlan> {
    let (k, l) = (series.channels(), series.len());
    if horizon == 0 || horizon >= l {
        return Err(Error::domain(format!("forecast horizon {horizon} needs 0 < h < L = {l}")));
    }
    let targets = (0..k * l).map(|i| i % l >= l - horizon).collect();
    Ok(MaskPlan::from_targets(series, targets, Strategy::Forecast))
}

/// Network-ready split of a series under a mask plan.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// Values at target entries, zero elsewhere.
    pub x0: Tensor,
    /// Values at condition entries, zero elsewhere.
    pub x_cond: Tensor,
    pub target_mask: Tensor,
    pub cond_mask: Tensor,
}

pub fn split_condition_target(series: &TimeSeries, plan: &MaskPlan) -> Result<TrainingBatch> {
    plan.validate(series)?;
    Ok(TrainingBatch {
        x0: series.values.zip_map(&plan.target_mask, |v, m| v * m)?,
        x_cond: series.values.zip_map(&plan.cond_mask, |v, m| v * m)?,
        target_mask: plan.target_mask.clone(),
        cond_mask: plan.cond_mask.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Random masking or pattern mimicry, chosen per draw.
    Mixture,
    Random,
    PatternMimic,
    Block,
    Forecast,
}

/// Training-time masking policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    /// Fixed random-mask ratio; `None` draws it from U[0.1, 0.9] per series.
    pub ratio: Option<f64>,
    pub block_len: (usize, usize),
    pub n_blocks: usize,
    pub horizon: usize,
    /// Probability of pattern mimicry under [`MaskStrategy::Mixture`].
    pub mix_weight: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Mixture,
            ratio: None,
            block_len: (5, 15),
            n_blocks: 1,
            horizon: 1,
            mix_weight: 0.5,
        }
    }
}

/// Bounds for random ratios and the pattern-mimic fallback.
pub const RATIO_RANGE: (f64, f64) = (0.1, 0.9);

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config("mask.ratio", "must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::config("mask.mix_weight", "must lie in [0, 1]"));
        }
        if self.block_len.0 == 0 || self.block_len.0 > self.block_len.1 {
            return Err(Error::config("mask.block_len", "need 1 ≤ min ≤ max"));
        }
        Ok(())
    }

    fn ratio(&self, rng: &mut impl Rng) -> f64 {
        self.ratio.unwrap_or_else(|| rng.random_range(RATIO_RANGE.0..=RATIO_RANGE.1))
    }

    /// Draws one plan. `donor` is the missingness of another window;
    /// `missing_ratio` is the dataset's empirical missing fraction.
    pub fn draw(&self, series: &TimeSeries, donor: Option<&Tensor>, missing_ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
        let fallback = missing_ratio.clamp(RATIO_RANGE.0, RATIO_RANGE.1);
        match self.strategy {
            MaskStrategy::Random => {
                let r = self.ratio(rng);
                random_mask(series, r, rng)
            }
            MaskStrategy::PatternMimic => match donor {
                Some(d) => pattern_mimic_mask(series, d, fallback, rng),
                None => random_mask(series, fallback, rng),
            },
            MaskStrategy::Mixture => {
                let mimic = rng.random_bool(self.mix_weight);
                match (mimic, donor) {
                    (true, Some(d)) => pattern_mimic_mask(series, d, fallback, rng),
                    _ => {
                        let r = self.ratio(rng);
                        random_mask(series, r, rng)
                    }
                }
            }
            MaskStrategy::Block => block_mask(series, self.block_len, self.n_blocks, None, rng),
            MaskStrategy::Forecast => forecast_mask(series, self.horizon),
        }
    }
}
