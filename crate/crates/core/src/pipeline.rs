//! End-to-end runs behind the command-line subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    compute_stats, denormalize_tensor, generate_synthetic, load_csv, normalize_with, read_series, save_csv, split_indices, windows,
    CsvSchema, Dataset, NormStats, Split,
};
use crate::denoiser::{DataShape, Denoiser};
use crate::diffusion::impute;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::masking::{MaskConfig, MaskPlan, TimeSeries};
use crate::metrics::{empirical_quantile, MetricReport};
use crate::numerics::Tensor;
use crate::trainer::{train, write_loss_curve, TrainOutcome, TrainStatus};

/// Quantile levels written to the band CSV: the 95% and 50% intervals.
pub const BAND_LEVELS: [f64; 4] = [0.025, 0.25, 0.75, 0.975];

/// Decorrelates the master seed for one consumer.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_MASK_STREAM: u64 = 3;
const SAMPLE_STREAM: u64 = 4;

pub fn execution(cfg: &RunConfig) -> Result<Execution> {
    Ok(if cfg.get::<bool>("parallel")? {
        Execution::default()
    } else {
        Execution::Sequential
    })
}

pub fn schema(cfg: &RunConfig) -> Result<CsvSchema> {
    Ok(CsvSchema {
        time_column: cfg.require("data.time_column")?.to_string(),
        value_columns: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthReport {
    pub path: PathBuf,
    pub rows: usize,
    pub windows: usize,
}

pub fn run_synth(cfg: &RunConfig) -> Result<SynthReport> {
    let spec = cfg.synth()?;
    let data = generate_synthetic(&spec)?;
    let path = cfg.path("synth.out")?;
    save_csv(&data, &path)?;
    Ok(SynthReport {
        rows: data.len() * data.window_len(),
        windows: data.len(),
        path,
    })
}

/// Windowed data with its split and train-set statistics.
pub struct Prepared {
    pub raw: Dataset,
    pub split: Split,
    pub stats: NormStats,
}

impl Prepared {
    pub fn normalized(&self, indices: &[usize]) -> Result<Dataset> {
        normalize_with(&self.raw.subset(indices), &self.stats)
    }
}

pub fn prepare(cfg: &RunConfig, raw: Dataset) -> Result<Prepared> {
    let split = split_indices(
        raw.len(),
        cfg.get("data.valid_frac")?,
        cfg.get("data.test_frac")?,
        cfg.get("data.split_seed")?,
    )?;
    let stats = compute_stats(&raw.subset(&split.train));
    Ok(Prepared { raw, split, stats })
}

pub fn load_data(cfg: &RunConfig, key: &str) -> Result<Dataset> {
    let path = cfg.path(key)?;
    let (len, stride) = cfg.window()?;
    load_csv(&path, &schema(cfg)?, len, stride)
}

/// Builds and trains a model on the train split, validating on the
/// validation split.
pub fn train_prepared(cfg: &RunConfig, data: &Prepared) -> Result<(Checkpoint, TrainOutcome)> {
    let denoiser = cfg.denoiser()?;
    let schedule = cfg.schedule()?;
    let mask = cfg.mask()?;
    let mut tcfg = cfg.train()?;
    let seed = cfg.seed()?;
    tcfg.seed = derive_seed(seed, TRAIN_STREAM);
    let shape = DataShape {
        channels: data.raw.channels(),
        length: data.raw.window_len(),
    };
    let model = Denoiser::new(denoiser, shape, schedule.steps, derive_seed(seed, INIT_STREAM))?;
    let train_set = data.normalized(&data.split.train)?;
    let valid_set = data.normalized(&data.split.valid)?;
    let sched = schedule.build()?;
    let outcome = train(model, &train_set, &valid_set, &sched, &mask, &tcfg, execution(cfg)?)?;
    let ck = Checkpoint {
        model: outcome.best.clone(),
        schedule,
        stats: Some(data.stats.clone()),
        channel_names: data.raw.channel_names.clone(),
        step: outcome.best_step,
        optimizer: Some(outcome.optimizer.clone()),
    };
    Ok((ck, outcome))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub status: TrainStatus,
    pub train_windows: usize,
    pub valid_windows: usize,
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    let raw = load_data(cfg, "data.path")?;
    let data = prepare(cfg, raw)?;
    let checkpoint = cfg.path("train.checkpoint")?;
    let loss_curve = cfg.path("train.loss_curve")?;
    let (ck, outcome) = train_prepared(cfg, &data)?;
    ck.save(&checkpoint)?;
    write_loss_curve(&outcome.curve, &loss_curve)?;
    Ok(TrainReport {
        checkpoint,
        loss_curve,
        best_step: outcome.best_step,
        best_valid_loss: outcome.best_valid_loss,
        status: outcome.status,
        train_windows: data.split.train.len(),
        valid_windows: data.split.valid.len(),
    })
}

/// Reads `path` and cuts it into windows matching the checkpoint's shape.
pub fn load_for_checkpoint(ck: &Checkpoint, path: &Path, schema: &CsvSchema, stride: Option<usize>) -> Result<Dataset> {
    let (series, names) = read_series(path, schema)?;
    let shape = ck.model.shape();
    if series.channels() != shape.channels {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} channels, {} has {}",
            shape.channels,
            path.display(),
            series.channels()
        )));
    }
    if series.len() < shape.length {
        return Err(Error::Incompatible(format!(
            "checkpoint expects windows of {} steps, {} has {} rows",
            shape.length,
            path.display(),
            series.len()
        )));
    }
    Dataset::new(windows(&series, shape.length, stride.unwrap_or(shape.length))?, names)
}

fn identity_stats(k: usize) -> NormStats {
    NormStats {
        mean: vec![0.0; k],
        std: vec![1.0; k],
        constant: vec![false; k],
    }
}

fn window_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SAMPLE_STREAM));
    rng.set_stream(index as u64);
    rng
}

/// Posterior samples for every missing entry of `series`, in data units,
/// `[S, K, L]`. Observed entries hold the observation in every sample.
pub fn sample_window(ck: &Checkpoint, series: &TimeSeries, num_samples: usize, seed: u64, index: usize, exec: Execution) -> Result<Tensor> {
    let k = series.channels();
    let stats = ck.stats.clone().unwrap_or_else(|| identity_stats(k));
    let norm = normalize_with(&Dataset::new(vec![series.clone()], vec![String::new(); k])?, &stats)?;
    let sched = ck.schedule.build()?;
    let mut rng = window_rng(seed, index);
    let result = impute(&norm.windows[0], &ck.model, &sched, num_samples, &mut rng, exec)?;
    let mut samples = if result.num_samples() == 0 {
        Tensor::zeros(&[num_samples, k, series.len()])
    } else {
        denormalize_tensor(&result.samples, &stats)?
    };
    let kl = series.values.len();
    for s in samples.data_mut().chunks_exact_mut(kl) {
        for ((v, &x), &m) in s.iter_mut().zip(series.values.data()).zip(series.missing.data()) {
            if m == 0.0 {
                *v = x;
            }
        }
    }
    Ok(samples)
}

/// Per-entry sample mean and [`BAND_LEVELS`] quantiles of `[S, K, L]`.
pub fn summarize(samples: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (s, k, l) = samples.dims3()?;
    if s == 0 {
        return Err(Error::domain("no samples to summarize"));
    }
    let mut mean = Tensor::zeros(&[k, l]);
    let mut bands = vec![Tensor::zeros(&[k, l]); BAND_LEVELS.len()];
    let mut col = vec![0.0; s];
    for e in 0..k * l {
        for (j, c) in col.iter_mut().enumerate() {
            *c = samples.data()[j * k * l + e];
        }
        col.sort_by(f64::total_cmp);
        // Identical samples (observed entries) keep their value exactly.
        mean.data_mut()[e] = if col[0] == col[s - 1] {
            col[0]
        } else {
            col.iter().sum::<f64>() / s as f64
        };
        for (b, &q) in bands.iter_mut().zip(&BAND_LEVELS) {
            b.data_mut()[e] = empirical_quantile(&col, q);
        }
    }
    Ok((mean, bands))
}

pub struct ImputedWindow {
    pub series: TimeSeries,
    pub mean: Tensor,
    pub bands: Vec<Tensor>,
}

pub fn impute_dataset(ck: &Checkpoint, data: &Dataset, num_samples: usize, seed: u64, exec: Execution) -> Result<Vec<ImputedWindow>> {
    if num_samples == 0 {
        return Err(Error::config("impute.num_samples", "must be ≥ 1"));
    }
    data.windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let samples = sample_window(ck, w, num_samples, seed, i, exec)?;
            let (mean, bands) = summarize(&samples)?;
            Ok(ImputedWindow {
                series: w.clone(),
                mean,
                bands,
            })
        })
        .collect()
}

pub fn bands_csv(windows: &[ImputedWindow], channel_names: &[String], num_samples: usize) -> String {
    let mut out = format!("# num_samples={num_samples}\ntime,channel,observed,mean,q025,q25,q75,q975\n");
    for w in windows {
        let l = w.series.len();
        for t in 0..l {
            for (c, name) in channel_names.iter().enumerate() {
                let e = c * l + t;
                let observed = u8::from(w.series.missing.data()[e] == 0.0);
                let _ = write!(out, "{},{},{},{}", w.series.timestamps[t], name, observed, w.mean.data()[e]);
                for b in &w.bands {
                    let _ = write!(out, ",{}", b.data()[e]);
                }
                out.push('\n');
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputeReport {
    pub out: PathBuf,
    pub bands: PathBuf,
    pub windows: usize,
    pub imputed_entries: usize,
    pub num_samples: usize,
}

pub fn run_impute(cfg: &RunConfig) -> Result<ImputeReport> {
    let ck = Checkpoint::load(&cfg.path("impute.checkpoint")?)?;
    let data_key = if cfg.is_set("impute.data") { "impute.data" } else { "data.path" };
    let data = load_for_checkpoint(&ck, &cfg.path(data_key)?, &schema(cfg)?, cfg.get_opt("data.stride")?)?;
    let num_samples: usize = cfg.get("impute.num_samples")?;
    let imputed = impute_dataset(&ck, &data, num_samples, cfg.seed()?, execution(cfg)?)?;
    let filled = Dataset::new(
        imputed
            .iter()
            .map(|w| TimeSeries::new(w.mean.clone(), Tensor::zeros(w.mean.shape()), w.series.timestamps.clone()))
            .collect::<Result<_>>()?,
        data.channel_names.clone(),
    )?;
    let out = cfg.path("impute.out")?;
    let bands = cfg.path("impute.bands")?;
    save_csv(&filled, &out)?;
    std::fs::write(&bands, bands_csv(&imputed, &data.channel_names, num_samples)).map_err(|e| Error::io(&bands, e))?;
    Ok(ImputeReport {
        out,
        bands,
        windows: data.len(),
        imputed_entries: data.windows.iter().map(TimeSeries::n_missing).sum(),
        num_samples,
    })
}

/// A window with a held-out subset of its observations.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub truth: TimeSeries,
    pub plan: MaskPlan,
}

impl EvalCase {
    /// The window as the imputer sees it: held-out entries marked missing.
    pub fn masked(&self) -> Result<TimeSeries> {
        let missing = self.plan.cond_mask.map(|m| 1.0 - m);
        TimeSeries::new(self.truth.values.clone(), missing, self.truth.timestamps.clone())
    }
}

pub fn eval_cases(data: &Dataset, mask: &MaskConfig, seed: u64) -> Result<Vec<EvalCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, EVAL_MASK_STREAM));
    let ratio = data.missing_ratio();
    data.windows
        .iter()
        .map(|w| {
            Ok(EvalCase {
                truth: w.clone(),
                plan: mask.draw(w, None, ratio, &mut rng)?,
            })
        })
        .collect()
}

pub fn sample_cases(ck: &Checkpoint, cases: &[EvalCase], num_samples: usize, seed: u64, exec: Execution) -> Result<Vec<Tensor>> {
    if num_samples == 0 {
        return Err(Error::config("evaluate.num_samples", "must be ≥ 1"));
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| sample_window(ck, &c.masked()?, num_samples, seed, i, exec))
        .collect()
}

/// One "sample" per case equal to the ground truth.
pub fn oracle_samples(cases: &[EvalCase]) -> Vec<Tensor> {
    cases
        .iter()
        .map(|c| {
            let v = &c.truth.values;
            let mut shape = vec![1];
            shape.extend_from_slice(v.shape());
            Tensor::new(shape, v.data().to_vec()).expect("shape matches data")
        })
        .collect()
}

/// Pools every case and scores the samples at held-out entries. The point
/// estimate is the per-entry sample mean.
pub fn score_cases(cases: &[EvalCase], samples: &[Tensor]) -> Result<MetricReport> {
    if cases.len() != samples.len() {
        return Err(Error::dim("one sample tensor per case required"));
    }
    let n_targets: usize = cases.iter().map(|c| c.plan.n_targets()).sum();
    if n_targets == 0 {
        return Err(Error::DegenerateEvaluation("the evaluation mask selects no entries".into()));
    }
    let s = samples.first().map(|t| t.shape()[0]).unwrap_or(0);
    let l = cases[0].truth.len();
    let rows: usize = cases.iter().map(|c| c.truth.channels()).sum();
    let mut y = Vec::with_capacity(rows * l);
    let mut mask = Vec::with_capacity(rows * l);
    let mut pooled = vec![Vec::with_capacity(rows * l); s];
    for (c, t) in cases.iter().zip(samples) {
        let (ts, k, tl) = t.dims3()?;
        if ts != s || tl != l || k != c.truth.channels() {
            return Err(Error::dim("sample tensors must share S and L and match their case"));
        }
        y.extend_from_slice(c.truth.values.data());
        mask.extend_from_slice(c.plan.target_mask.data());
        for (j, p) in pooled.iter_mut().enumerate() {
            p.extend_from_slice(&t.data()[j * k * l..(j + 1) * k * l]);
        }
    }
    let y = Tensor::new(vec![rows, l], y)?;
    let mask = Tensor::new(vec![rows, l], mask)?;
    let all = Tensor::new(vec![s, rows, l], pooled.concat())?;
    let (point, _) = summarize(&all)?;
    MetricReport::compute(&all, &point, &y, &mask).map_err(|e| match e {
        Error::Domain(m) => Error::DegenerateEvaluation(m),
        e => e,
    })
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    let oracle: bool = cfg.get("evaluate.oracle")?;
    let mask = cfg.eval_mask()?;
    let data_key = if cfg.is_set("evaluate.data") {
        "evaluate.data"
    } else {
        "data.path"
    };
    let path = cfg.path(data_key)?;
    let ck = if oracle {
        None
    } else {
        Some(Checkpoint::load(&cfg.path("evaluate.checkpoint")?)?)
    };
    let data = match &ck {
        Some(ck) => load_for_checkpoint(ck, &path, &schema(cfg)?, cfg.get_opt("data.stride")?)?,
        None => load_data(cfg, data_key)?,
    };
    let data = match cfg.require("evaluate.split")? {
        "all" => data,
        "test" => {
            let split = prepare(cfg, data)?;
            split.raw.subset(&split.split.test)
        }
        other => return Err(Error::config("evaluate.split", format!("expected all or test, found `{other}`"))),
    };
    let seed = cfg.seed()?;
    let cases = eval_cases(&data, &mask, seed)?;
    if cases.iter().all(|c| c.plan.n_targets() == 0) {
        return Err(Error::DegenerateEvaluation("the evaluation mask selects no entries".into()));
    }
    let samples = match &ck {
        Some(ck) => sample_cases(ck, &cases, cfg.get("evaluate.num_samples")?, seed, execution(cfg)?)?,
        None => oracle_samples(&cases),
    };
    let report = score_cases(&cases, &samples)?;
    if cfg.is_set("evaluate.out") {
        let out = cfg.path("evaluate.out")?;
        std::fs::write(&out, report.to_json()).map_err(|e| Error::io(&out, e))?;
    }
    Ok(report)
}
