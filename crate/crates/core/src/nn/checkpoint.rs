//! Single-file parameter container:
//!
//! ```text
//! b"PFCKPT01" | manifest length (u64 LE) | manifest JSON | tensor data
//! ```
//!
//! Tensor data is little-endian `f32`; manifest offsets are relative to the
//! start of the data section.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PFCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub offset: u64,
    pub len_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub endianness: String,
    pub tensors: Vec<CheckpointEntry>,
    /// Free-form run metadata (model config, vocabulary size, variant).
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, metadata: serde_json::Value, mut w: W) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        let values = p.var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let offset = data.len() as u64;
        for v in &values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(CheckpointEntry {
            name: name.to_string(),
            shape: p.var.dims().to_vec(),
            group: p.group,
            offset,
            len_bytes: (values.len() * 4) as u64,
        });
    }
    let manifest = CheckpointManifest {
        dtype: "f32".into(),
        endianness: "little".into(),
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&data)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint into its manifest and named `f32` buffers.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointManifest, BTreeMap<String, Vec<f32>>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
    if manifest.dtype != "f32" || manifest.endianness != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported encoding {} / {}",
            manifest.dtype, manifest.endianness
        )));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start + e.len_bytes as usize;
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.len() != e.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("tensor `{}` size does not match its shape", e.name)));
        }
        out.insert(e.name.clone(), values);
    }
    Ok((manifest, out))
}

impl ParamStore {
    /// Copies every stored tensor into this store. Names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, p) in self.iter() {
            let values = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            let t = Tensor::from_slice(values, p.var.shape(), self.device())?;
            self.set(name, &t)?;
        }
        if let Some(extra) = tensors.keys().find(|k| self.get(k).is_none()) {
            return Err(Error::Checkpoint(format!("checkpoint has unknown tensor `{extra}`")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_bad_magic() {
        let mut a = ParamStore::new(DType::F32, 1);
        a.xavier("w", 3, 2, ParamGroup::Visual).unwrap();
        a.zeros("b", &[2], ParamGroup::Other).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&a, serde_json::json!({"k": 1}), &mut buf).unwrap();

        let mut b = ParamStore::new(DType::F32, 2);
        b.xavier("w", 3, 2, ParamGroup::Visual).unwrap();
        b.zeros("b", &[2], ParamGroup::Other).unwrap();
        let (manifest, tensors) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(manifest.metadata["k"], 1);
        assert_eq!(manifest.tensors[1].group, ParamGroup::Visual);
        b.load_tensors(&tensors).unwrap();
        assert_eq!(a.values("w").unwrap(), b.values("w").unwrap());

        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
