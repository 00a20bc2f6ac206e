//! Model files: `FQCK` magic, a format version, a JSON manifest, then every
//! parameter as little-endian `f64` in parameter-id order.
//!
//! Layout: `b"FQCK" | u32 version | u64 manifest_len | manifest | blob`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ComplexArray, RealArray, Value};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"FQCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub complex: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub blob_sha256: String,
    /// Free-form run information (seed, metrics, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes(model: &Model, extra: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(model.param_count() * 8);
    let mut params = Vec::new();
    for p in model.store().iter() {
        for v in p.value.components() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            complex: p.value.is_complex(),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: model.config().clone(),
        params,
        blob_sha256: hex(&Sha256::digest(&blob)),
        extra,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file (missing FQCK header)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let blob = &body[len..];
    if hex(&Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(bad("parameter blob digest mismatch (file corrupted)"));
    }
    let mut floats = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    if blob.len() % 8 != 0 {
        return Err(bad("parameter blob length is not a multiple of 8"));
    }
    let mut values = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let value = if p.complex {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let re = floats.next().ok_or_else(|| bad("truncated parameter blob"))?;
                let im = floats.next().ok_or_else(|| bad("truncated parameter blob"))?;
                data.push(num_complex::Complex64::new(re, im));
            }
            Value::Complex(ComplexArray::new(p.shape.clone(), data)?)
        } else {
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated parameter blob"));
            }
            Value::Real(RealArray::new(p.shape.clone(), data)?)
        };
        values.push((p.name.clone(), value));
    }
    if floats.next().is_some() {
        return Err(bad("trailing data after parameters"));
    }
    let mut model = Model::new(manifest.config.clone(), 0)?;
    model.load_values(&values)?;
    Ok((model, manifest))
}

pub fn save(model: &Model, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, extra)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Manifest)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Errors listing both configurations when a checkpoint cannot serve `expected`.
pub fn check_compatible(stored: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if stored == expected {
        return Ok(());
    }
    let show = |c: &ModelConfig| serde_json::to_string(c).unwrap_or_default();
    Err(Error::Checkpoint(format!(
        "checkpoint/config mismatch:\n  checkpoint: {}\n  config:     {}",
        show(stored),
        show(expected)
    )))
}
