//! Checkpoint container: a JSON metadata block followed by named float32
//! tensors.
//!
//! Layout (little-endian):
//!
//! ```text
//! "APCK" | u32 version | u32 meta_len | meta JSON
//! u32 tensor_count | { u32 name_len | name | u32 rows | u32 cols | f32 × rows·cols }*
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{param_layout, ModelConfig, Param, SequenceModel};
use super::tensor::Mat;
use crate::annotations::ClassVocab;
use crate::error::{Error, Result};
use crate::features::{write_atomic, FeatureKind};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"APCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: ClassVocab,
    pub feature_kind: FeatureKind,
    pub train_seed: u64,
    pub epoch: usize,
    pub val_f1: f64,
    /// Labels were collapsed to call / non-call for training.
    #[serde(default)]
    pub binary: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: SequenceModel<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + meta.len() + self.model.num_parameters() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in &self.model.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for v in p.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptFile(path.into(), m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| corrupt("truncated"))? != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "APCK",
            });
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!("format version {version}")));
        }
        let meta_len = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let meta_bytes = r.take(meta_len).ok_or_else(|| corrupt("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
        meta.config.validate()?;
        let count = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let layout = param_layout(&meta.config);
        if count != layout.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{count} tensors, config expects {}",
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for spec in layout {
            let name_len = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
            let name = r.take(name_len).ok_or_else(|| corrupt("truncated"))?;
            let name = std::str::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rows = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
            let cols = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
            if name != spec.name || rows != spec.rows || cols != spec.cols {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name} {rows}x{cols}, config expects {} {}x{}",
                    spec.name, spec.rows, spec.cols
                )));
            }
            let raw = r.take(rows * cols * 4).ok_or_else(|| corrupt("truncated tensor data"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Param {
                name: name.to_string(),
                value: Mat::from_vec(rows, cols, data),
            });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let model = SequenceModel {
            config: meta.config.clone(),
            params,
        };
        if !model.all_finite() {
            return Err(corrupt("non-finite parameter"));
        }
        Ok(Checkpoint { meta, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
