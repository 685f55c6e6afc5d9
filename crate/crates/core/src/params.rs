//! Named parameter registry and the binary checkpoint format.
//!
//! # Checkpoint layout
//!
//! ```text
//! bytes 0..8     magic  b"GCLVCKPT"
//! bytes 8..16    u64 LE manifest length M
//! bytes 16..16+M UTF-8 JSON manifest:
//!                {"format_version":1,
//!                 "metadata":{...},
//!                 "tensors":[{"name":..,"shape":[..],"offset":..}, ...]}
//! remainder      f64 LE payload; `offset` counts f64 elements from payload start
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GCLVCKPT";
const FORMAT_VERSION: u32 = 1;

/// A trainable tensor with a stable dotted name.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat registry of every trainable tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable tensor. Names must be unique.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        values: Vec<f64>,
        shape: &[usize],
    ) -> Result<Tensor> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name '{name}'")));
        }
        let tensor = Tensor::param(values, shape)?;
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor: tensor.clone(),
        });
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Parameter> + 'a {
        self.params
            .iter()
            .filter(move |p| p.name.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Order-sensitive FNV-1a hash over the exact bits of every parameter
    /// matching `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.with_prefix(prefix) {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in p.tensor.value().iter() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .params
                .iter()
                .map(|p| SnapshotEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.to_vec(),
                })
                .collect(),
        }
    }

    /// Copies values from a snapshot. Every registered name must be present
    /// with an identical shape.
    pub fn load(&self, snapshot: &ParamSnapshot) -> Result<()> {
        let by_name: HashMap<&str, &SnapshotEntry> = snapshot
            .entries
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        for p in &self.params {
            let entry = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{}'", p.name)))?;
            if entry.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                    p.name,
                    entry.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.update_value(|v| v.copy_from_slice(&entry.values));
        }
        if snapshot.entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                snapshot.entries.len(),
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Plain-data copy of a registry; `Send`, so it can cross threads.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ParamSnapshot {
    pub fn to_bytes(&self, metadata: &serde_json::Value) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let m = ManifestEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    offset,
                };
                offset += e.values.len();
                m
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            metadata: metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamSnapshot, serde_json::Value)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let payload = &bytes[payload_start..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for t in manifest.tensors {
            let n: usize = t.shape.iter().product();
            let end = t
                .offset
                .checked_add(n)
                .filter(|&e| e <= floats.len())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor '{}' extends past payload", t.name))
                })?;
            entries.push(SnapshotEntry {
                name: t.name,
                shape: t.shape,
                values: floats[t.offset..end].to_vec(),
            });
        }
        Ok((ParamSnapshot { entries }, manifest.metadata))
    }

    pub fn save(&self, path: &Path, metadata: &serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(metadata)).map_err(|e| Error::io(path, e))
    }

    pub fn load_file(path: &Path) -> Result<(ParamSnapshot, serde_json::Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("enc.w", vec![1.0, -2.5, 3.25, 0.0], &[2, 2])
            .unwrap();
        s.register("enc.b", vec![0.125], &[1]).unwrap();
        s.register("gen.w", vec![f64::MIN_POSITIVE, 7.0], &[2])
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.register("enc.w", vec![0.0], &[1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = store();
        let meta = serde_json::json!({"seed": 7});
        let bytes = s.snapshot().to_bytes(&meta);
        let (snap, meta2) = ParamSnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(snap, s.snapshot());
        let other = store();
        other.get("enc.w").unwrap().update_value(|v| v.fill(0.0));
        other.load(&snap).unwrap();
        assert_eq!(other.checksum(""), s.checksum(""));
    }

    #[test]
    fn load_rejects_architecture_mismatch() {
        let mut small = ParamStore::new();
        small.register("enc.w", vec![0.0; 6], &[2, 3]).unwrap();
        let err = small.load(&store().snapshot()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
        assert!(ParamSnapshot::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn checksum_tracks_prefix() {
        let s = store();
        let enc = s.checksum("enc.");
        let gen = s.checksum("gen.");
        s.get("gen.w").unwrap().update_value(|v| v[1] = 8.0);
        assert_eq!(s.checksum("enc."), enc);
        assert_ne!(s.checksum("gen."), gen);
    }
}
