//! Binary parameter checkpoints.
//!
//! Layout: the 6 magic bytes `DUALF1`, a little-endian `u64` manifest length,
//! the JSON manifest (parameter name, shape, byte offset into the payload,
//! plus free-form metadata), then the payload of little-endian `f64` values.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DUALF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, meta: serde_json::Value) -> Result<(), NumericsError> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.value(id);
        entries.push(ManifestEntry { name: store.name(id).to_string(), shape: t.shape().to_vec(), offset });
        offset += 8 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest { params: entries, meta })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for id in store.ids() {
        for v in store.value(id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses a checkpoint into its manifest and named tensors.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Manifest, Vec<(String, Tensor)>), NumericsError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NumericsError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    let manifest: Manifest = serde_json::from_slice(&buf)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(NumericsError::Format(format!("parameter {} runs past end of payload", e.name)));
        }
        let data = payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}

/// Copies checkpoint tensors into `store` by name; every store parameter must
/// be present with a matching shape.
pub fn load_into(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<(), NumericsError> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (_, t) = tensors.iter().find(|(n, _)| *n == name).ok_or_else(|| NumericsError::Format(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != store.value(id).shape() {
            return Err(NumericsError::Shape(format!("parameter {name}: checkpoint shape {:?} vs model shape {:?}", t.shape(), store.value(id).shape())));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}
