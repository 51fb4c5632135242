//! CSV ingestion, windowing, per-channel normalization, synthetic series
//! and train/valid/test splitting.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::TimeSeries;
use crate::numerics::Tensor;

/// Per-channel z-scoring statistics over observed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels with fewer than two observations or zero spread; they are
    /// centred but divided by 1.
    pub constant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub windows: Vec<TimeSeries>,
    pub channel_names: Vec<String>,
    /// Present once the windows hold normalized values.
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(windows: Vec<TimeSeries>, channel_names: Vec<String>) -> Result<Self> {
        if let Some(bad) = windows.iter().find(|w| w.channels() != channel_names.len()) {
            return Err(Error::dim(format!(
                "window has {} channels, dataset names {}",
                bad.channels(),
                channel_names.len()
            )));
        }
        Ok(Self {
            windows,
            channel_names,
            stats: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Window length, or 0 for an empty dataset.
    pub fn window_len(&self) -> usize {
        self.windows.first().map_or(0, TimeSeries::len)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Fraction of missing entries across all windows.
    pub fn missing_ratio(&self) -> f64 {
        let total: usize = self.windows.iter().map(|w| w.values.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let missing: usize = self.windows.iter().map(TimeSeries::n_missing).sum();
        missing as f64 / total as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            channel_names: self.channel_names.clone(),
            stats: self.stats.clone(),
        }
    }
}

/// Which CSV columns hold time and values.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub time_column: String,
    /// `None` takes every non-time column in file order.
    pub value_columns: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            time_column: "time".into(),
            value_columns: None,
        }
    }
}

/// Reads the whole file as one series `[K, rows]`.
pub fn read_series(path: &Path, schema: &CsvSchema) -> Result<(TimeSeries, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in {}", path.display())))
    };
    let time_idx = find(&schema.time_column)?;
    let (names, cols): (Vec<String>, Vec<usize>) = match &schema.value_columns {
        Some(list) => {
            let cols = list.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
            (list.clone(), cols)
        }
        None => header
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != time_idx)
            .map(|(i, h)| (h.trim().to_string(), i))
            .unzip(),
    };
    if names.is_empty() {
        return Err(Error::Schema("no value columns".into()));
    }
    let k = names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut missing: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut times = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                message: format!("cannot parse `{s}` as a number"),
            })
        };
        let t = record.get(time_idx).unwrap_or("");
        if t.trim().is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty timestamp".into(),
            });
        }
        times.push(parse(t)?);
        for (c, &col) in cols.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            if cell.trim().is_empty() {
                columns[c].push(0.0);
                missing[c].push(1.0);
            } else {
                columns[c].push(parse(cell)?);
                missing[c].push(0.0);
            }
        }
    }
    let l = times.len();
    let values = Tensor::matrix(k, l, columns.concat())?;
    let missing = Tensor::matrix(k, l, missing.concat())?;
    let series = TimeSeries::new(values, missing, times).map_err(|e| match e {
        Error::Domain(m) => Error::Parse { line: 0, message: m },
        other => other,
    })?;
    Ok((series, names))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Cuts `series` into windows of `len` steps starting every `stride` steps;
/// a trailing partial window is dropped.
pub fn windows(series: &TimeSeries, len: usize, stride: usize) -> Result<Vec<TimeSeries>> {
    if len == 0 || stride == 0 {
        return Err(Error::config("data.window_len", "window length and stride must be ≥ 1"));
    }
    let (k, l) = (series.channels(), series.len());
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= l {
        let slice = |t: &Tensor| {
            let mut d = Vec::with_capacity(k * len);
            for c in 0..k {
                d.extend_from_slice(&t.row(c)[start..start + len]);
            }
            Tensor::matrix(k, len, d)
        };
        out.push(TimeSeries::new(
            slice(&series.values)?,
            slice(&series.missing)?,
            series.timestamps[start..start + len].to_vec(),
        )?);
        start += stride;
    }
    Ok(out)
}

/// Loads a CSV and windows it.
pub fn load_csv(path: &Path, schema: &CsvSchema, window_len: usize, stride: usize) -> Result<Dataset> {
    let (series, names) = read_series(path, schema)?;
    Dataset::new(windows(&series, window_len, stride)?, names)
}

/// Writes every window in order under a `time,<channels…>` header. Values
/// use shortest round-trip formatting; missing entries are empty cells.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut header = vec!["time".to_string()];
    header.extend(dataset.channel_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for win in &dataset.windows {
        for t in 0..win.len() {
            let mut row = vec![format!("{}", win.timestamps[t])];
            for c in 0..win.channels() {
                row.push(if win.missing.at(c, t) == 1.0 {
                    String::new()
                } else {
                    format!("{}", win.values.at(c, t))
                });
            }
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Statistics over the observed entries of every window.
pub fn compute_stats(dataset: &Dataset) -> NormStats {
    let k = dataset.channels();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for w in &dataset.windows {
        for c in 0..k {
            for (v, m) in w.values.row(c).iter().zip(w.missing.row(c)) {
                if *m == 0.0 {
                    sum[c] += v;
                    count[c] += 1;
                }
            }
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; k];
    for w in &dataset.windows {
        for c in 0..k {
            for (v, m) in w.values.row(c).iter().zip(w.missing.row(c)) {
                if *m == 0.0 {
                    sq[c] += (v - mean[c]).powi(2);
                }
            }
        }
    }
    let mut std = vec![1.0; k];
    let mut constant = vec![false; k];
    for c in 0..k {
        let s = if count[c] > 0 { (sq[c] / count[c] as f64).sqrt() } else { 0.0 };
        if count[c] < 2 || s <= 1e-12 * mean[c].abs().max(1.0) {
            constant[c] = true;
        } else {
            std[c] = s;
        }
    }
    NormStats { mean, std, constant }
}

fn transform(dataset: &Dataset, f: impl Fn(f64, usize) -> f64) -> Result<Vec<TimeSeries>> {
    dataset
        .windows
        .iter()
        .map(|w| {
            let mut values = w.values.clone();
            let l = w.len();
            for (i, v) in values.data_mut().iter_mut().enumerate() {
                if w.missing.data()[i] == 0.0 {
                    *v = f(*v, i / l);
                }
            }
            TimeSeries::new(values, w.missing.clone(), w.timestamps.clone())
        })
        .collect()
}

/// Z-scores observed entries with `stats` (missing entries stay 0).
pub fn normalize_with(dataset: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if stats.mean.len() != dataset.channels() {
        return Err(Error::Incompatible(format!(
            "statistics cover {} channels, data has {}",
            stats.mean.len(),
            dataset.channels()
        )));
    }
    Ok(Dataset {
        windows: transform(dataset, |v, c| (v - stats.mean[c]) / stats.std[c])?,
        channel_names: dataset.channel_names.clone(),
        stats: Some(stats.clone()),
    })
}

pub fn normalize(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = compute_stats(dataset);
    Ok((normalize_with(dataset, &stats)?, stats))
}

pub fn denormalize(dataset: &Dataset) -> Result<Dataset> {
    let stats = dataset.stats.as_ref().ok_or_else(|| Error::domain("dataset is not normalized"))?;
    Ok(Dataset {
        windows: transform(dataset, |v, c| v * stats.std[c] + stats.mean[c])?,
        channel_names: dataset.channel_names.clone(),
        stats: None,
    })
}

/// Maps a normalized `[.., K, L]` tensor back to data units (every entry).
pub fn denormalize_tensor(t: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let k = stats.mean.len();
    let shape = t.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != k {
        return Err(Error::dim(format!("tensor {shape:?} does not have {k} channels")));
    }
    let l = shape[shape.len() - 1];
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / l) % k;
        *v = *v * stats.std[c] + stats.mean[c];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    CoupledOscillator,
    SinusoidMixture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub channels: usize,
    pub length: usize,
    pub windows: usize,
    /// `K × K` coupling for the oscillators; `None` is zero coupling.
    pub coupling: Option<Tensor>,
    pub damping: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Time between samples of the oscillator system.
    pub sample_dt: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::SinusoidMixture,
            channels: 4,
            length: 100,
            windows: 1,
            coupling: None,
            damping: 0.05,
            noise_std: 0.05,
            seed: 0,
            sample_dt: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 {
            return Err(Error::config("synth.k", "K and L must be ≥ 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("synth.noise_std", "must be ≥ 0"));
        }
        if !(self.sample_dt > 0.0) {
            return Err(Error::config("synth.sample_dt", "must be > 0"));
        }
        if let Some(c) = &self.coupling {
            if c.shape() != [self.channels, self.channels] {
                return Err(Error::config("synth.coupling", "must be K × K"));
            }
        }
        Ok(())
    }
}

/// Natural frequencies and per-window initial conditions of the oscillator
/// system, in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct OscillatorSetup {
    pub omega: Vec<f64>,
    /// `(positions, velocities)` per window.
    pub initial: Vec<(Vec<f64>, Vec<f64>)>,
}

const RK4_SUBSTEPS: usize = 10;

/// Draws the oscillator parameters exactly as [`generate_synthetic`] does.
pub fn oscillator_setup(spec: &SyntheticSpec) -> OscillatorSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    oscillator_setup_from(spec, &mut rng)
}

fn oscillator_setup_from(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> OscillatorSetup {
    let k = spec.channels;
    let omega = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
    let initial = (0..spec.windows)
        .map(|_| {
            let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            (x, v)
        })
        .collect();
    OscillatorSetup { omega, initial }
}

/// `ẍᵢ = −ωᵢ² xᵢ − γ ẋᵢ + Σⱼ Cᵢⱼ xⱼ`, state `[x; v]`.
fn oscillator_rhs(state: &[f64], omega: &[f64], damping: f64, coupling: Option<&Tensor>, out: &mut [f64]) {
    let k = omega.len();
    let (x, v) = state.split_at(k);
    for i in 0..k {
        out[i] = v[i];
        let mut acc = -omega[i] * omega[i] * x[i] - damping * v[i];
        if let Some(c) = coupling {
            acc += (0..k).map(|j| c.at(i, j) * x[j]).sum::<f64>();
        }
        out[k + i] = acc;
    }
}

fn integrate_oscillators(spec: &SyntheticSpec, omega: &[f64], x0: &[f64], v0: &[f64]) -> Vec<Vec<f64>> {
    let k = omega.len();
    let h = spec.sample_dt / RK4_SUBSTEPS as f64;
    let mut state: Vec<f64> = x0.iter().chain(v0).copied().collect();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; 2 * k], vec![0.0; 2 * k], vec![0.0; 2 * k], vec![0.0; 2 * k]);
    let mut tmp = vec![0.0; 2 * k];
    let coupling = spec.coupling.as_ref();
    let mut traj = vec![Vec::with_capacity(spec.length); k];
    for _ in 0..spec.length {
        for i in 0..k {
            traj[i].push(state[i]);
        }
        for _ in 0..RK4_SUBSTEPS {
            oscillator_rhs(&state, omega, spec.damping, coupling, &mut k1);
            for j in 0..2 * k {
                tmp[j] = state[j] + 0.5 * h * k1[j];
            }
            oscillator_rhs(&tmp, omega, spec.damping, coupling, &mut k2);
            for j in 0..2 * k {
                tmp[j] = state[j] + 0.5 * h * k2[j];
            }
            oscillator_rhs(&tmp, omega, spec.damping, coupling, &mut k3);
            for j in 0..2 * k {
                tmp[j] = state[j] + h * k3[j];
            }
            oscillator_rhs(&tmp, omega, spec.damping, coupling, &mut k4);
            for j in 0..2 * k {
                state[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
    }
    traj
}

/// Seeded synthetic dataset; window `w` carries timestamps `w·L … w·L+L−1`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (k, l) = (spec.channels, spec.length);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut windows = Vec::with_capacity(spec.windows);
    match spec.kind {
        SyntheticKind::CoupledOscillator => {
            let setup = oscillator_setup_from(spec, &mut rng);
            for (x0, v0) in &setup.initial {
                let traj = integrate_oscillators(spec, &setup.omega, x0, v0);
                windows.push(traj.concat());
            }
        }
        SyntheticKind::SinusoidMixture => {
            let freqs: Vec<[f64; 3]> = (0..k).map(|_| std::array::from_fn(|_| rng.random_range(0.01..0.1))).collect();
            for _ in 0..spec.windows {
                let mut data = Vec::with_capacity(k * l);
                for f in &freqs {
                    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5));
                    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
                    for t in 0..l {
                        data.push((0..3).map(|j| amp[j] * (2.0 * PI * f[j] * t as f64 + phase[j]).sin()).sum());
                    }
                }
                windows.push(data);
            }
        }
    }
    let series = windows
        .into_iter()
        .enumerate()
        .map(|(w, mut data)| {
            if spec.noise_std > 0.0 {
                for v in &mut data {
                    *v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let times = (0..l).map(|t| (w * l + t) as f64).collect::<Vec<_>>();
            TimeSeries::new(Tensor::matrix(k, l, data)?, Tensor::zeros(&[k, l]), times)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(series, (0..k).map(|c| format!("ch{c}")).collect())
}

/// Window indices of a seeded train/valid/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles window indices with `seed` and cuts them by `fractions`
/// (valid, test); training keeps the remainder and is never empty for a
/// nonempty dataset.
pub fn split_indices(n: usize, valid_frac: f64, test_frac: f64, seed: u64) -> Result<Split> {
    if !(valid_frac >= 0.0 && test_frac >= 0.0 && valid_frac + test_frac < 1.0) {
        return Err(Error::config("data.valid_frac", "split fractions must be ≥ 0 and sum below 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_valid = (valid_frac * n as f64).round() as usize;
    let mut n_test = (test_frac * n as f64).round() as usize;
    while n > 0 && n_valid + n_test >= n {
        if n_test >= n_valid && n_test > 0 {
            n_test -= 1;
        } else {
            n_valid -= 1;
        }
    }
    let valid = idx[..n_valid].to_vec();
    let test = idx[n_valid..n_valid + n_test].to_vec();
    let train = idx[n_valid + n_test..].to_vec();
    Ok(Split { train, valid, test })
}

#[cfg(test)]
mod tests;
