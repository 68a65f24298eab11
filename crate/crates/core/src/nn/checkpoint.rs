//! Flat binary container of named f64 arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [u64 manifest_len][manifest JSON, manifest_len bytes][f64 data ...]
//! ```
//!
//! The manifest is `{"version": "1", "meta": {..}, "arrays": [{"name", "shape", "offset"}]}`
//! where `offset` is the byte offset of the array's first element measured
//! from the start of the data section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    arrays: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// In-memory form of the container. Arrays keep insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an array.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.arrays.push((name, tensor)),
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, Tensor::scalar(v));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no array named {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.require(name)?.item())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            version: CONTAINER_VERSION.to_string(),
            meta: self.meta.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: u64, detail: &str| Error::Format {
            offset,
            detail: detail.to_string(),
        };
        if bytes.len() < 8 {
            return Err(fmt(0, "truncated manifest length"));
        }
        let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let data_start = 8u64
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| fmt(0, "manifest length exceeds file size"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..data_start as usize])
            .map_err(|e| fmt(8, &format!("bad manifest: {e}")))?;
        if manifest.version != CONTAINER_VERSION {
            return Err(fmt(8, &format!("unsupported container version {:?}", manifest.version)));
        }
        let data = &bytes[data_start as usize..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(fmt(
                    data_start + e.offset,
                    &format!("array {} runs past end of file", e.name),
                ));
            }
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, vals)
                .map_err(|_| fmt(data_start + e.offset, &format!("array {} has invalid shape", e.name)))?;
            arrays.push((e.name, t));
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        // Write to a sibling file first so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_arrays_and_meta() {
        let mut ck = Checkpoint::new();
        ck.meta.insert("teacher".into(), "dsp-prosody".into());
        ck.insert("a", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap());
        ck.insert_scalar("hop", 256.0);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn layout_is_little_endian_with_offsets() {
        let mut ck = Checkpoint::new();
        ck.insert("x", Tensor::new(&[1], vec![1.0]).unwrap());
        ck.insert("y", Tensor::new(&[2], vec![2.0, 3.0]).unwrap());
        let bytes = ck.to_bytes().unwrap();
        let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        assert_eq!(manifest["version"], "1");
        assert_eq!(manifest["arrays"][1]["offset"], 8);
        assert_eq!(manifest["arrays"][1]["shape"], serde_json::json!([2]));
        let data = &bytes[8 + mlen..];
        assert_eq!(&data[8..16], &2.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_data_reports_offset() {
        let mut ck = Checkpoint::new();
        ck.insert("x", Tensor::new(&[4], vec![1.0; 4]).unwrap());
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert!(offset > 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
