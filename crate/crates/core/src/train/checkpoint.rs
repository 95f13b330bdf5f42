//! Binary checkpoint container. Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "LSEQCKPT"
//! u32       format version
//! u64       header length H
//! H bytes   UTF-8 JSON header
//! f32 × N   parameters, in header tensor-table order, row-major
//! f32 × N   Adam first moments   (only when header.has_adam)
//! f32 × N   Adam second moments  (only when header.has_adam)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

use super::{EarlyStopping, TrainHyper};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSEQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub epochs_since_improvement: u32,
    pub hyper: Option<TrainHyper>,
    /// Free-form run description (modes, seeds, data paths).
    pub run: std::collections::BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn stopping(&self, patience: u32) -> EarlyStopping {
        EarlyStopping {
            patience,
            best: self.best_val_loss,
            epochs_since_improvement: self.epochs_since_improvement,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab_hash: String,
    pub meta: CheckpointMeta,
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    meta: CheckpointMeta,
    n_params: usize,
    has_adam: bool,
    tensors: Vec<TensorEntry>,
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    buf.reserve(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self.params.layout();
        let n = self.params.len();
        if let Some(a) = &self.adam {
            if a.m.len() != n || a.v.len() != n {
                return Err(Error::Checkpoint("Adam moments do not match the parameter count".into()));
            }
        }
        let header = Header {
            config: self.params.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            meta: self.meta.clone(),
            n_params: n,
            has_adam: self.adam.is_some(),
            tensors: layout
                .tensors
                .iter()
                .map(|(name, shape, r)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset: r.start,
                    len: r.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(20 + json.len() + n * 12);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        put_f32s(&mut buf, &self.params.data);
        if let Some(a) = &self.adam {
            put_f32s(&mut buf, &a.m);
            put_f32s(&mut buf, &a.v);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let params = ModelParams::<f32>::zeros(header.config.clone())?;
        let n = params.len();
        if header.n_params != n {
            return Err(Error::Checkpoint(format!("{} parameters stored, config implies {n}", header.n_params)));
        }
        let sections = if header.has_adam { 3 } else { 1 };
        let data = &body[hlen..];
        if data.len() != sections * n * 4 {
            return Err(Error::Checkpoint(format!("expected {} tensor bytes, found {}", sections * n * 4, data.len())));
        }
        let read = |k: usize| -> Vec<f32> {
            data[k * n * 4..(k + 1) * n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let params = ModelParams {
            config: header.config,
            data: read(0),
        };
        if !params.is_finite() {
            return Err(bad("non-finite parameters"));
        }
        let adam = header.has_adam.then(|| AdamState {
            m: read(1),
            v: read(2),
            step: header.meta.step,
        });
        Ok(Checkpoint {
            params,
            vocab_hash: header.vocab_hash,
            meta: header.meta,
            adam,
        })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
