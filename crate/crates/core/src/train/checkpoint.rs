use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use autodiff::{ParamKind, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TrainConfig, TrainingLog};
use crate::data::NormStats;
use crate::model::{ModelConfig, SleepStager};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub buffer: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Everything needed to resume or evaluate a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub phase1_fold_index: usize,
    pub norm_stats: NormStats,
    /// Every subject used for gradient steps, validation or normalization
    /// along this model's history.
    pub lineage: BTreeSet<String>,
    pub params: Vec<NamedTensor>,
    pub log: TrainingLog,
}

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

impl Checkpoint {
    pub fn from_model(
        model: &SleepStager<f32>,
        train_config: &TrainConfig,
        phase1_fold_index: usize,
        norm_stats: NormStats,
        lineage: BTreeSet<String>,
        log: TrainingLog,
    ) -> Self {
        let s = &model.store;
        let params = s
            .ids()
            .map(|id| NamedTensor {
                name: s.name(id).to_string(),
                buffer: s.kind(id) == ParamKind::Buffer,
                shape: s.value(id).shape().to_vec(),
                data: s.value(id).data().to_vec(),
            })
            .collect();
        Checkpoint {
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            phase1_fold_index,
            norm_stats,
            lineage,
            params,
            log,
        }
    }

    /// Rebuilds the model, checking every name and shape against the config.
    pub fn to_model(&self) -> Result<SleepStager<f32>> {
        let mut model = SleepStager::<f32>::build(&self.model_config, 0)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} tensors stored, config declares {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, p) in ids.into_iter().zip(&self.params) {
            if model.store.name(id) != p.name {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {:?} found where {:?} was expected",
                    p.name,
                    model.store.name(id)
                )));
            }
            let t = Tensor::new(p.shape.clone(), p.data.clone()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            model.store.set_value(id, t).map_err(|e| CheckpointError::Corrupt(format!("{}: {e}", p.name)))?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let echo = ConfigEcho { model: self.model_config.clone(), train: self.train_config.clone() };
        w.bytes(&serde_json::to_vec(&echo).expect("config serializes"));
        w.u32(self.phase1_fold_index as u32);
        let ns = &self.norm_stats;
        w.u32(ns.mean.len() as u32);
        ns.mean.iter().chain(&ns.std).for_each(|&x| w.0.extend_from_slice(&x.to_le_bytes()));
        w.strings(&ns.provenance);
        w.strings(&self.lineage);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.bytes(p.name.as_bytes());
            w.0.push(p.buffer as u8);
            w.u32(p.shape.len() as u32);
            p.shape.iter().for_each(|&d| w.u32(d as u32));
            p.data.iter().for_each(|x| w.0.extend_from_slice(&x.to_le_bytes()));
        }
        w.bytes(&serde_json::to_vec(&self.log).expect("log serializes"));
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let echo: ConfigEcho = r.json()?;
        let phase1_fold_index = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let mut f64s = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| Ok(f64::from_le_bytes(r.take(8)?.try_into().unwrap()))).collect()
        };
        let mean = f64s(channels)?;
        let std = f64s(channels)?;
        let provenance = r.strings()?;
        let lineage = r.strings()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let buffer = match r.take(1)?[0] {
                0 => false,
                1 => true,
                k => return Err(CheckpointError::Corrupt(format!("tensor {name}: kind byte {k}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(NamedTensor { name, buffer, shape, data });
        }
        let log = r.json()?;
        if r.at != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            model_config: echo.model,
            train_config: echo.train,
            phase1_fold_index,
            norm_stats: NormStats { mean, std, provenance },
            lineage,
            params,
            log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn strings(&mut self, set: &BTreeSet<String>) {
        self.u32(set.len() as u32);
        set.iter().for_each(|s| self.bytes(s.as_bytes()));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.at))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }

    fn strings(&mut self) -> Result<BTreeSet<String>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.string()).collect()
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let n = self.u32()? as usize;
        serde_json::from_slice(self.take(n)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}
