//! Self-describing binary container for a trained denoiser.
//!
//! Layout: the 8-byte magic `SSDTSCK1`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every parameter tensor as raw
//! little-endian `f64` in header order, followed by the Adam first and
//! second moments when present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::denoiser::{DataShape, Denoiser, DenoiserConfig};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::trainer::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"SSDTSCK1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: ScheduleConfig,
    /// Statistics the model's inputs were normalized with.
    pub stats: Option<NormStats>,
    pub channel_names: Vec<String>,
    /// Training step the parameters come from.
    pub step: usize,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    denoiser: DenoiserConfig,
    shape: DataShape,
    max_step: usize,
    schedule: ScheduleConfig,
    stats: Option<NormStats>,
    channel_names: Vec<String>,
    step: usize,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerHeader>,
}

fn push_tensors(out: &mut Vec<u8>, tensors: &[Tensor]) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn fill(&mut self, t: &mut Tensor) -> Result<()> {
        let raw = self.take(t.len() * 8)?;
        for (v, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.schedule.steps != self.model.max_step() {
            return Err(Error::Checkpoint("schedule length differs from the model's step range".into()));
        }
        let header = Header {
            denoiser: self.model.config().clone(),
            shape: self.model.shape(),
            max_step: self.model.max_step(),
            schedule: self.schedule.clone(),
            stats: self.stats.clone(),
            channel_names: self.channel_names.clone(),
            step: self.step,
            params: self
                .model
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 24 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_tensors(&mut out, self.model.params.tensors());
        if let Some(o) = &self.optimizer {
            push_tensors(&mut out, &o.m);
            push_tensors(&mut out, &o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not an SSD-TS checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut model = Denoiser::new(header.denoiser, header.shape, header.max_step, 0)?;
        if header.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {} tensors, architecture has {}",
                header.params.len(),
                model.params.len()
            )));
        }
        for (i, entry) in header.params.iter().enumerate() {
            let id = model
                .params
                .id_of(&entry.name)
                .filter(|id| id.index() == i)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", entry.name)))?;
            if model.params.get(id).shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter `{}` has the wrong shape", entry.name)));
            }
        }
        for t in model.params.tensors_mut() {
            r.fill(t)?;
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut state = AdamState::new(&model.params, h.config);
                state.step = h.step;
                for t in state.m.iter_mut().chain(state.v.iter_mut()) {
                    r.fill(t)?;
                }
                Some(state)
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            model,
            schedule: header.schedule,
            stats: header.stats,
            channel_names: header.channel_names,
            step: header.step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
