//! Parameter checkpoint: magic `TGCK1`, a little-endian `u64` manifest length, the JSON
//! manifest, then every tensor listed in the manifest as little-endian `f64` values, in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Buffer, Param};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TGCK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form block for whoever owns the store (model config, scaling, grid).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint<S: Scalar>(store: &ParamStore<S>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let listed: Vec<(&str, TensorRole, &Tensor<S>)> = store
        .params()
        .iter()
        .map(|p| (p.name.as_str(), TensorRole::Param, &p.value))
        .chain(store.buffers().iter().map(|b| (b.name.as_str(), TensorRole::Buffer, &b.value)))
        .chain(store.params().iter().map(|p| (p.name.as_str(), TensorRole::AdamM, &p.m)))
        .chain(store.params().iter().map(|p| (p.name.as_str(), TensorRole::AdamV, &p.v)))
        .collect();
    let entries = listed
        .iter()
        .map(|&(name, role, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            role,
        })
        .collect();
    let tensors: Vec<&Tensor<S>> = listed.iter().map(|&(_, _, t)| t).collect();
    let manifest = Manifest {
        format: "TGCK1".into(),
        adam_step: store.step(),
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(13 + json.len() + 8 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(ParamStore<S>, Manifest)> {
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let json_end = 13usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[13..json_end])?;
    let mut body = bytes[json_end..].chunks_exact(8);
    let mut read = |shape: &[usize]| -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let chunk = body.next().ok_or_else(|| Error::Format("truncated checkpoint body".into()))?;
            data.push(S::of(f64::from_le_bytes(chunk.try_into().unwrap())));
        }
        Tensor::from_vec(shape, data)
    };

    let mut store = ParamStore::new();
    let mut moments_m = Vec::new();
    let mut moments_v = Vec::new();
    for entry in &manifest.tensors {
        let t = read(&entry.shape)?;
        match entry.role {
            TensorRole::Param => store.push_raw(Param {
                name: entry.name.clone(),
                m: Tensor::zeros(&entry.shape),
                v: Tensor::zeros(&entry.shape),
                value: t,
            }),
            TensorRole::Buffer => store.push_raw_buffer(Buffer {
                name: entry.name.clone(),
                value: t,
            }),
            TensorRole::AdamM => moments_m.push((entry.name.clone(), t)),
            TensorRole::AdamV => moments_v.push((entry.name.clone(), t)),
        }
    }
    if body.next().is_some() {
        return Err(Error::Format("trailing bytes after checkpoint body".into()));
    }
    for (moments, is_m) in [(moments_m, true), (moments_v, false)] {
        if moments.is_empty() {
            continue;
        }
        if moments.len() != store.len() {
            return Err(Error::Format("optimizer moments do not match parameters".into()));
        }
        for (p, (name, t)) in store.params_mut().iter_mut().zip(moments) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Format(format!("moment {name} does not match parameter {}", p.name)));
            }
            if is_m {
                p.m = t;
            } else {
                p.v = t;
            }
        }
    }
    store.set_step(manifest.adam_step);
    Ok((store, manifest))
}

pub fn save_store<S: Scalar>(path: &Path, store: &ParamStore<S>, meta: serde_json::Value) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_store<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
