//! Binary checkpoints: a JSON header followed by named little-endian tensor
//! blobs for parameters and Adam moments.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{NetError, Result};
use crate::training::{DeformationConfig, EpochLog, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"BSFACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub deformation: DeformationConfig,
    pub epoch: usize,
    pub step: u64,
    pub mu: f64,
    pub total_steps: u64,
    pub adam_t: u64,
    pub dtype: String,
    /// Hash of the configuration that produced the run, if known.
    pub config_hash: Option<String>,
    pub history: Vec<EpochLog>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(NetError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(NetError::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(NetError::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: DType, shape: &[usize], dev: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let t = match dtype {
        DType::F32 if bytes.len() == 4 * n => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        DType::F64 if bytes.len() == 8 * n => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        _ => {
            return Err(NetError::Checkpoint(format!(
                "blob of {} bytes does not hold {n} {dtype:?} values",
                bytes.len()
            )))
        }
    };
    Ok(t)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes the trainer state.
pub fn to_bytes(trainer: &Trainer, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: trainer.model_cfg.clone(),
        train: trainer.cfg.clone(),
        deformation: trainer.deformation,
        epoch: trainer.epoch,
        step: trainer.step,
        mu: trainer.mu,
        total_steps: trainer.total_steps,
        adam_t: trainer.adam.t,
        dtype: dtype_name(trainer.dtype())?.to_string(),
        config_hash: config_hash.map(String::from),
        history: trainer.epochs.clone(),
    };
    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in trainer.ps.vars() {
        blobs.insert(format!("param/{name}"), var.as_tensor().detach());
    }
    for (name, t) in &trainer.adam.m {
        blobs.insert(format!("adam.m/{name}"), t.clone());
    }
    for (name, t) in &trainer.adam.v {
        blobs.insert(format!("adam.v/{name}"), t.clone());
    }
    let header = serde_json::to_vec(&meta).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for (name, t) in &blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let bytes = tensor_bytes(t)?;
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NetError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parsed checkpoint contents.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blobs: BTreeMap<String, Tensor>,
}

pub fn from_bytes(bytes: &[u8], dev: &Device) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(NetError::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NetError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = c.u64()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| NetError::Checkpoint(format!("header: {e}")))?;
    let dtype = parse_dtype(&meta.dtype)?;
    let count = c.u64()?;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| NetError::Checkpoint("blob name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let blen = c.u64()? as usize;
        let t = tensor_from_bytes(c.take(blen)?, dtype, &shape, dev)?;
        blobs.insert(name, t);
    }
    if c.pos != bytes.len() {
        return Err(NetError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { meta, blobs })
}

impl Checkpoint {
    /// Rebuilds a trainer with the stored weights, moments and schedule.
    pub fn into_trainer(self, dev: Device) -> Result<Trainer> {
        let m = self.meta;
        let dtype = parse_dtype(&m.dtype)?;
        let mut tr = Trainer::new(m.model, m.train, m.deformation, 1, dtype, dev)?;
        tr.epoch = m.epoch;
        tr.step = m.step;
        tr.mu = m.mu;
        tr.total_steps = m.total_steps;
        tr.adam.t = m.adam_t;
        tr.epochs = m.history;
        let mut loaded = 0;
        for (key, t) in self.blobs {
            if let Some(name) = key.strip_prefix("param/") {
                if tr.ps.var(name).is_none() {
                    return Err(NetError::Checkpoint(format!("unknown parameter {name}")));
                }
                tr.ps.assign(name, &t)?;
                loaded += 1;
            } else if let Some(name) = key.strip_prefix("adam.m/") {
                tr.adam.m.insert(name.to_string(), t);
            } else if let Some(name) = key.strip_prefix("adam.v/") {
                tr.adam.v.insert(name.to_string(), t);
            } else {
                return Err(NetError::Checkpoint(format!("unknown blob {key}")));
            }
        }
        if loaded != tr.ps.len() {
            return Err(NetError::Checkpoint(format!("{loaded} of {} parameters present", tr.ps.len())));
        }
        Ok(tr)
    }
}

pub fn save(trainer: &Trainer, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let bytes = to_bytes(trainer, config_hash)?;
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn read(path: &Path, dev: &Device) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    from_bytes(&bytes, dev)
}

pub fn load(path: &Path, dev: Device) -> Result<Trainer> {
    read(path, &dev)?.into_trainer(dev)
}
