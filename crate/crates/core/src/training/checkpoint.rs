//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header, then
//! every tensor's elements in header order as little-endian values of the
//! header's dtype. Tensors are keyed by module path.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsadError};
use crate::fsutil::write_atomic;
use crate::nn::{Entry, EntryMut, Module, Real, Tensor};

use super::branch::{Branch, Model, ModelMeta};

pub const MAGIC: &[u8; 8] = b"RSADCKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Encoder plus whole-classification head.
    Pretrain,
    /// Full dual-branch training state.
    State,
    /// Main branch only.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub dtype: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

pub fn write_checkpoint<T: Real, M: Serialize>(
    path: &Path,
    kind: CheckpointKind,
    meta: &M,
    tensors: &TensorMap<T>,
) -> Result<()> {
    let header = CheckpointHeader {
        kind,
        dtype: T::DTYPE.to_string(),
        meta: serde_json::to_value(meta).map_err(|e| RsadError::input(format!("checkpoint metadata: {e}")))?,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let body: usize = tensors.values().map(|t| t.len() * T::BYTES).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + body);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in tensors.values() {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    write_atomic(path, &bytes)
}

fn decode_values<T: Real>(raw: &[u8], dtype: &str) -> Option<Vec<T>> {
    match dtype {
        "f32" => Some(raw.chunks_exact(4).map(|b| T::c(f32::read_le(b) as f64)).collect()),
        "f64" => Some(
            raw.chunks_exact(8)
                .map(|b| T::from_f64(f64::read_le(b)).expect("finite cast"))
                .collect(),
        ),
        _ => None,
    }
}

/// Reads a checkpoint, converting elements to `T` when the stored dtype
/// differs.
pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(CheckpointHeader, TensorMap<T>)> {
    let bytes = fs::read(path).map_err(|e| RsadError::io(path, e))?;
    let bad = |reason: &str| RsadError::corrupt(path, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| RsadError::corrupt(path, format!("header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(RsadError::corrupt(path, format!("unknown dtype {other}"))),
    };
    let mut offset = 16 + hlen;
    let mut tensors = BTreeMap::new();
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let values = decode_values::<T>(raw, &header.dtype).expect("dtype checked");
        tensors.insert(meta.name.clone(), Tensor::from_vec(&meta.shape, values));
        offset += n * width;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

pub fn parse_meta<M: DeserializeOwned>(header: &CheckpointHeader, path: &Path) -> Result<M> {
    serde_json::from_value(header.meta.clone()).map_err(|e| RsadError::corrupt(path, format!("metadata: {e}")))
}

pub fn expect_kind(header: &CheckpointHeader, kind: CheckpointKind, path: &Path) -> Result<()> {
    if header.kind != kind {
        return Err(RsadError::input(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            header.kind
        )));
    }
    Ok(())
}

/// Copies every parameter and buffer of `module` into `out` under `prefix`.
pub fn collect_tensors<T: Real>(module: &dyn Module<T>, prefix: &str, out: &mut TensorMap<T>) {
    module.visit(prefix, &mut |name, entry| {
        let t = match entry {
            Entry::Param(p) => p.value.clone(),
            Entry::Buffer(b) => b.clone(),
        };
        out.insert(name.to_string(), t);
    });
}

/// Overwrites every parameter and buffer of `module` from `tensors`. Missing
/// entries and shape mismatches are errors.
pub fn restore_tensors<T: Real>(module: &mut dyn Module<T>, prefix: &str, tensors: &TensorMap<T>) -> Result<()> {
    let mut err = None;
    module.visit_mut(prefix, &mut |name, entry| {
        if err.is_some() {
            return;
        }
        let slot = match entry {
            EntryMut::Param(p) => &mut p.value,
            EntryMut::Buffer(b) => b,
        };
        match tensors.get(name) {
            Some(t) if t.shape() == slot.shape() => slot.data_mut().copy_from_slice(t.data()),
            Some(t) => {
                err = Some(RsadError::input(format!(
                    "tensor {name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => err = Some(RsadError::input(format!("checkpoint lacks tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Builds a branch of the described architecture and loads its weights.
pub fn restore_branch<T: Real>(meta: &ModelMeta, prefix: &str, tensors: &TensorMap<T>) -> Result<Branch<T>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut branch = Branch::new(&meta.backbone, meta.rhs, &mut rng)?;
    restore_tensors(&mut branch, prefix, tensors)?;
    Ok(branch)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    collect_tensors(&model.branch, "", &mut tensors);
    write_checkpoint(path, CheckpointKind::Model, &model.meta, &tensors)
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let (header, tensors) = read_checkpoint::<T>(path)?;
    expect_kind(&header, CheckpointKind::Model, path)?;
    let meta: ModelMeta = parse_meta(&header, path)?;
    let branch = restore_branch(&meta, "", &tensors)?;
    Model::new(meta, branch)
}
