//! Deterministic and probabilistic imputation metrics at masked entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// The 19 quantile levels `0.05, 0.10, …, 0.95` of the CRPS estimator.
pub fn crps_levels() -> [f64; 19] {
    std::array::from_fn(|i| (i + 1) as f64 * 0.05)
}

/// Empirical quantile of sorted data with linear interpolation between
/// order statistics (position `q·(n−1)`).
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pinball loss `(α − 1{y<q})(y − q)`.
pub fn quantile_loss(alpha: f64, q: f64, y: f64) -> f64 {
    let ind = if y < q { 1.0 } else { 0.0 };
    (alpha - ind) * (y - q)
}

/// CRPS estimate from the 19 quantiles at [`crps_levels`].
pub fn crps_from_quantiles(quantiles: &[f64], y: f64) -> f64 {
    debug_assert_eq!(quantiles.len(), 19);
    let levels = crps_levels();
    let s: f64 = levels.iter().zip(quantiles).map(|(&a, &q)| 2.0 * quantile_loss(a, q, y)).sum();
    s / levels.len() as f64
}

fn sorted_copy(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// CRPS of one entry from its sample set (any order).
pub fn crps_entry(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("CRPS needs at least one sample"));
    }
    let sorted = sorted_copy(samples);
    let q: Vec<f64> = crps_levels().iter().map(|&a| empirical_quantile(&sorted, a)).collect();
    Ok(crps_from_quantiles(&q, y))
}

fn check_mask(y: &Tensor, other: &Tensor, mask: &Tensor) -> Result<usize> {
    y.expect_same_shape(other)?;
    y.expect_same_shape(mask)?;
    let n = mask.data().iter().filter(|&&m| m != 0.0).count();
    if n == 0 {
        return Err(Error::domain("evaluation mask is empty"));
    }
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mre: f64,
    pub n_eval: usize,
    /// Scored entries with `y = 0`, left out of the MRE average.
    pub mre_excluded: usize,
}

pub fn pointwise_metrics(y: &Tensor, y_hat: &Tensor, mask: &Tensor) -> Result<PointMetrics> {
    let n = check_mask(y, y_hat, mask)?;
    let (mut abs, mut sq, mut rel) = (0.0, 0.0, 0.0);
    let mut excluded = 0;
    for ((&t, &p), &m) in y.data().iter().zip(y_hat.data()).zip(mask.data()) {
        if m == 0.0 {
            continue;
        }
        let e = t - p;
        abs += e.abs();
        sq += e * e;
        if t != 0.0 {
            rel += e.abs() / t.abs();
        } else {
            excluded += 1;
        }
    }
    let mse = sq / n as f64;
    let n_rel = n - excluded;
    Ok(PointMetrics {
        mae: abs / n as f64,
        mse,
        rmse: mse.sqrt(),
        mre: if n_rel > 0 { rel / n_rel as f64 } else { 0.0 },
        n_eval: n,
        mre_excluded: excluded,
    })
}

/// `Σ CRPS / Σ|y|` over masked entries; `samples: [S, K, L]`.
pub fn crps_normalized(samples: &Tensor, y: &Tensor, mask: &Tensor) -> Result<f64> {
    let (s, k, l) = samples.dims3()?;
    if [k, l] != y.shape() {
        return Err(Error::dim(format!(
            "samples {:?} do not match target {:?}",
            samples.shape(),
            y.shape()
        )));
    }
    check_mask(y, y, mask)?;
    let (mut num, mut den) = (0.0, 0.0);
    let mut column = vec![0.0; s];
    for (i, (&t, &m)) in y.data().iter().zip(mask.data()).enumerate() {
        if m == 0.0 {
            continue;
        }
        for (j, c) in column.iter_mut().enumerate() {
            *c = samples.data()[j * k * l + i];
        }
        num += crps_entry(&column, t)?;
        den += t.abs();
    }
    if den <= 0.0 {
        return Err(Error::domain("CRPS normalization Σ|y| over the mask is zero"));
    }
    Ok(num / den)
}

/// All five metrics of one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mre: f64,
    pub crps: f64,
    pub n_eval: usize,
}

impl MetricReport {
    /// Scores `point` for the deterministic metrics and `samples` for CRPS.
    pub fn compute(samples: &Tensor, point: &Tensor, y: &Tensor, mask: &Tensor) -> Result<Self> {
        let p = pointwise_metrics(y, point, mask)?;
        Ok(Self {
            mae: p.mae,
            mse: p.mse,
            rmse: p.rmse,
            mre: p.mre,
            crps: crps_normalized(samples, y, mask)?,
            n_eval: p.n_eval,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}
