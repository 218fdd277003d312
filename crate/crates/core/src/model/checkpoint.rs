//! Versioned, self-describing checkpoint container.
//!
//! ```text
//! magic "VDPC" | version u16 | meta_len u32 | meta JSON | tensor_count u32
//! table: { name_len u16 | name | rows u32 | cols u32 | dtype u8 | offset u64 }*
//! data:  tensors back to back, little-endian, in table order
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64; offsets are relative to the start of
//! the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{parameter_shapes, ModelParameters};
use crate::data::Storage;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"VDPC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub phase: String,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub is_final: bool,
}

pub fn encode_checkpoint(
    params: &ModelParameters,
    meta: &CheckpointMeta,
    storage: Storage,
) -> Result<Vec<u8>> {
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| Error::contract(format!("meta encoding: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());

    let mut offset = 0u64;
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        out.push(match storage {
            Storage::F32 => 0,
            Storage::F64 => 1,
        });
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.len() * storage.width()) as u64;
    }
    for t in params.tensors.values() {
        for v in t.data() {
            match storage {
                Storage::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Storage::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParameters, CheckpointMeta)> {
    if bytes.len() < 32 + 4 {
        return Err(Error::format(0, "checkpoint too short"));
    }
    let body = bytes.len() - 32;
    if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
        return Err(Error::format(body as u64, "checkpoint checksum mismatch"));
    }
    let bytes = &bytes[..body];
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_at = r.pos as u64;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::format(meta_at, format!("checkpoint meta: {e}")))?;
    let count = r.u32()? as usize;

    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(r.pos as u64, "tensor name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let storage = match r.take(1)?[0] {
            0 => Storage::F32,
            1 => Storage::F64,
            t => return Err(Error::format(r.pos as u64 - 1, format!("unknown dtype {t}"))),
        };
        let offset = r.u64()? as usize;
        table.push((name, rows, cols, storage, offset));
    }
    let data_start = r.pos;
    let mut tensors = ParamSet::new();
    for (name, rows, cols, storage, offset) in table {
        let start = data_start + offset;
        let len = rows * cols * storage.width();
        if start + len > bytes.len() {
            return Err(Error::format(start as u64, format!("tensor `{name}` runs past end")));
        }
        let data = bytes[start..start + len]
            .chunks_exact(storage.width())
            .map(|c| match storage {
                Storage::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Storage::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        tensors.insert(name, Tensor::matrix(rows, cols, data)?);
    }

    let params = ModelParameters {
        config: meta.model.clone(),
        tensors,
    };
    check_shapes(&params, &meta.model)?;
    Ok((params, meta))
}

/// Verifies that `params` holds exactly the tensors `cfg` requires.
pub fn check_shapes(params: &ModelParameters, cfg: &ModelConfig) -> Result<()> {
    let expected = parameter_shapes(cfg);
    for (name, &(rows, cols)) in &expected {
        match params.tensors.get(name) {
            None => return Err(Error::Lookup(format!("tensor `{name}` missing from checkpoint"))),
            Some(t) if t.dims() != (rows, cols) => {
                return Err(Error::contract(format!(
                    "tensor `{name}` has shape {:?}, config requires [{rows}, {cols}]",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.tensors.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::contract(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    Ok(())
}

pub fn save_checkpoint(
    params: &ModelParameters,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, meta, Storage::F64)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParameters, CheckpointMeta)> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and requires its tensors to fit `expected`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(ModelParameters, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    check_shapes(&params, expected)?;
    Ok((params, meta))
}
