//! Binary checkpoints.
//!
//! Layout (little-endian): magic `LCMP`, `u32` version, the run config as
//! length-prefixed TOML, `u64` epoch, then one record per parameter
//! (`u32` name length, name, `u8` trainable, `u32` rank, `u64` dims, `f64`
//! data), then the optimizer: four `f64` hyperparameters, `u64` step count
//! and both moment buffers in parameter order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::RunConfig;
use crate::model::CompletionModel;
use crate::tensor::{Adam, AdamConfig, Tensor};

pub const MAGIC: &[u8; 4] = b"LCMP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub model: CompletionModel,
    pub optimizer: Adam,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION);
        let config = self.config.to_toml();
        w.u64(config.len() as u64);
        w.bytes(config.as_bytes());
        w.u64(self.epoch);
        let store = &self.model.store;
        w.u64(store.len() as u64);
        for id in store.ids() {
            let name = store.name(id);
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u8(store.is_trainable(id) as u8);
            let t = store.get(id);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        let c = self.optimizer.config;
        w.f64s(&[c.lr, c.beta1, c.beta2, c.eps]);
        w.u64(self.optimizer.step_count);
        let (m, v) = self.optimizer.moments();
        for t in m.iter().chain(v) {
            w.f64s(t.data());
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let config = RunConfig::from_toml(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let epoch = r.u64()?;
        let mut model =
            CompletionModel::new(config.model.clone(), 0).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let count = r.u64()? as usize;
        if count != model.store.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{count} parameters stored, model has {}",
                model.store.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?
                .to_string();
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let data = r.f64s(numel)?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown parameter {name}")))?;
            if model.store.get(id).shape() != shape.as_slice() || model.store.is_trainable(id) != trainable || seen[id.0] {
                return Err(CheckpointError::Corrupt(format!("parameter {name} does not match the model")));
            }
            seen[id.0] = true;
            model
                .store
                .set(id, Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
        }
        let hp = r.f64s(4)?;
        let adam_config = AdamConfig {
            lr: hp[0],
            beta1: hp[1],
            beta2: hp[2],
            eps: hp[3],
        };
        let step = r.u64()?;
        let mut read_moments = || -> Result<Vec<Tensor>, CheckpointError> {
            model
                .store
                .ids()
                .map(|id| {
                    let shape = model.store.get(id).shape().to_vec();
                    let n = model.store.get(id).numel();
                    Ok(Tensor::new(shape, r.f64s(n)?).unwrap())
                })
                .collect()
        };
        let m = read_moments()?;
        let v = read_moments()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        let optimizer = Adam::from_parts(adam_config, step, m, v).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(Self {
            config,
            epoch,
            model,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file first so an interrupted save
    /// never clobbers an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
