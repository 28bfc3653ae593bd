//! Named-tensor persistence: `manifest.json` plus `tensors.bin` holding
//! little-endian IEEE-754 row-major values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Ordered collection of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate checkpoint entry `{name}`")));
        }
        self.entries.push((name, t.cast()));
        Ok(())
    }

    pub fn push_store<T: Scalar>(&mut self, store: &ParamStore<T>) -> Result<()> {
        for (_, name, t) in store.iter() {
            self.push(name, t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every store parameter by name; shapes must match.
    pub fn load_store<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self.require(&name)?;
            store.set(id, t.cast())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let offset = bytes.len() as u64;
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_len: bytes.len() as u64 - offset,
            });
        }
        (Manifest { entries }, bytes)
    }

    pub fn decode(manifest: &Manifest, bytes: &[u8]) -> Result<Self> {
        let mut out = Checkpoint::new();
        for e in &manifest.entries {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("entry `{}`: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.byte_len != 4 * numel as u64 {
                return Err(Error::Format(format!(
                    "entry `{}`: byte_len {} does not match shape {:?}",
                    e.name, e.byte_len, e.shape
                )));
            }
            let start = e.byte_offset as usize;
            let end = start + e.byte_len as usize;
            let raw = bytes.get(start..end).ok_or_else(|| {
                Error::Format(format!("entry `{}`: range {start}..{end} past end of data", e.name))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push(&e.name, &Tensor::new(e.shape.clone(), data)?)?;
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, bytes) = self.encode();
        write_atomic(&dir.join(TENSORS), &bytes)?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&dir.join(MANIFEST), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        let tpath = dir.join(TENSORS);
        let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        Self::decode(&manifest, &bytes)
    }
}
