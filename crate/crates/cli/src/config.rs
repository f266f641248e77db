//! Run configuration: one TOML file, `--set key=value` overrides on top, and
//! a SHA-256 hash of the fully resolved result that every artifact carries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bsfa_core::data::Modality;
use bsfa_net::checkpoint::CheckpointMeta;
use bsfa_net::training::{DeformationConfig, TrainConfig};
use bsfa_net::ModelConfig;
use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

/// Environment variable that overrides `run.device`.
pub const DEVICE_ENV: &str = "BSFA_DEVICE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Modality directories to use (`CT-MRI`, `PET-MRI`, `SPECT-MRI`); empty means all.
    pub modalities: Vec<String>,
    /// Required image side; 0 accepts any size.
    pub image_size: usize,
    /// Held-out pairs per modality directory. Missing entries use 20/55/77.
    pub test_counts: BTreeMap<String, usize>,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            modalities: Vec::new(),
            image_size: 256,
            test_counts: BTreeMap::new(),
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub out_dir: PathBuf,
    /// `cpu`, `cuda` or `cuda:N`.
    pub device: String,
    /// `f32` or `f64`.
    pub dtype: String,
    /// Epochs between periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            device: "cpu".into(),
            dtype: "f32".into(),
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub run: RunSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub deformation: DeformationConfig,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so `--set data.root=/tmp/x` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override '{assignment}' is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("override key '{key}' is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.modalities()?;
        for name in self.data.test_counts.keys() {
            Modality::from_dir_name(name).ok_or_else(|| usage(format!("unknown modality {name} in data.test_counts")))?;
        }
        self.dtype()?;
        if self.run.checkpoint_every == 0 {
            return Err(usage("run.checkpoint_every must be positive"));
        }
        Ok(())
    }

    /// Selected modalities, all three when the list is empty.
    pub fn modalities(&self) -> Result<Vec<Modality>> {
        if self.data.modalities.is_empty() {
            return Ok(Modality::ALL.to_vec());
        }
        self.data
            .modalities
            .iter()
            .map(|m| Modality::from_dir_name(m).ok_or_else(|| usage(format!("unknown modality {m}"))))
            .collect()
    }

    pub fn test_count(&self, m: Modality) -> usize {
        self.data
            .test_counts
            .iter()
            .find(|(k, _)| Modality::from_dir_name(k) == Some(m))
            .map(|(_, v)| *v)
            .unwrap_or_else(|| m.default_test_count())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.run.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(usage(format!("run.dtype must be f32 or f64, got {other}"))),
        }
    }

    /// The compute device; `BSFA_DEVICE` takes precedence over `run.device`.
    pub fn device(&self) -> Result<Device> {
        let name = std::env::var(DEVICE_ENV).unwrap_or_else(|_| self.run.device.clone());
        parse_device(&name)
    }

    /// Replaces the network sections with those a checkpoint was trained with.
    pub fn with_checkpoint(&self, meta: &CheckpointMeta) -> Self {
        Self {
            model: meta.model.clone(),
            train: meta.train.clone(),
            deformation: meta.deformation,
            ..self.clone()
        }
    }

    /// The resolved configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn write_echo(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{command}.config.toml"));
        let text = format!("# config_hash: {}\n{}", self.hash(), self.to_toml());
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }
}

pub fn parse_device(name: &str) -> Result<Device> {
    let unavailable = |e: candle_core::Error| usage(format!("device {name} is unavailable: {e}"));
    match name.trim() {
        "cpu" => Ok(Device::Cpu),
        "cuda" => Device::new_cuda(0).map_err(unavailable),
        other => match other.strip_prefix("cuda:").map(str::parse::<usize>) {
            Some(Ok(i)) => Device::new_cuda(i).map_err(unavailable),
            _ => Err(usage(format!("unknown device '{other}' (expected cpu, cuda or cuda:N)"))),
        },
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
