//! Named-tensor files: a JSON manifest next to a raw little-endian `f32` blob.
//!
//! ```text
//! {
//!   "format": "excel-tensors",
//!   "version": 1,
//!   "dtype": "f32-le",
//!   "blob": "<file name of the blob, relative to the manifest>",
//!   "checksum": "fnv1a64:<16 lowercase hex digits>",
//!   "tensors": [ { "name": "...", "shape": [d0, d1, ...], "offset": <byte offset> }, ... ],
//!   "meta": { ... }
//! }
//! ```
//!
//! Tensors are stored row-major, back to back in manifest order. The
//! checksum is 64-bit FNV-1a over every byte of the blob. Weight files,
//! knowledge files, text banks, CAM exports and checkpoints all use this
//! layout.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT: &str = "excel-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob: String,
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: Value,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn checksum_string(v: u64) -> String {
    format!("fnv1a64:{v:016x}")
}

fn parse_checksum(path: &Path, s: &str) -> Result<u64> {
    s.strip_prefix("fnv1a64:")
        .and_then(|hex| u64::from_str_radix(hex, 16).ok())
        .ok_or_else(|| Error::format(path, format!("bad checksum field `{s}`")))
}

/// Ordered collection of named tensors plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: Vec<(String, Tensor)>,
    pub meta: Value,
}

impl TensorStore {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            meta: Value::Object(Default::default()),
        }
    }

    pub fn with_meta(meta: Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.tensors.push((name, t));
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Fetches `name` and checks it has exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: shape.to_vec(),
            });
        }
        Ok(t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(self.tensors.remove(idx).1)
    }

    /// Serialized blob bytes and manifest, without touching the filesystem.
    pub fn encode(&self, blob_name: &str) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            dtype: "f32-le".to_string(),
            blob: blob_name.to_string(),
            checksum: checksum_string(fnv1a64(&blob)),
            tensors: entries,
            meta: self.meta.clone(),
        };
        (manifest, blob)
    }

    /// Writes `<path>` (manifest) and its blob `<path stem>.bin` alongside.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = blob_path_for(manifest_path);
        let blob_name = blob_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(manifest_path, "manifest path has no file name"))?
            .to_string();
        let (manifest, blob) = self.encode(&blob_name);
        if let Some(dir) = manifest_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
        }
        fs::write(&blob_path, &blob).map_err(Error::io(&blob_path))?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(manifest_path, text).map_err(Error::io(manifest_path))?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(Error::io(manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(manifest_path, e.to_string()))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::format(
                manifest_path,
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        if manifest.dtype != "f32-le" {
            return Err(Error::format(
                manifest_path,
                format!("unsupported dtype {}", manifest.dtype),
            ));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(Error::io(&blob_path))?;
        Self::decode(manifest_path, &manifest, &blob)
    }

    pub fn decode(origin: &Path, manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        let expected = parse_checksum(origin, &manifest.checksum)?;
        let actual = fnv1a64(blob);
        if expected != actual {
            return Err(Error::Checksum { expected, actual });
        }
        let mut store = TensorStore::with_meta(manifest.meta.clone());
        for entry in &manifest.tensors {
            if store.tensors.iter().any(|(n, _)| *n == entry.name) {
                return Err(Error::format(origin, format!("duplicate tensor `{}`", entry.name)));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count * 4;
            if end > blob.len() {
                return Err(Error::format(
                    origin,
                    format!(
                        "tensor `{}` spans bytes {start}..{end} but blob has {}",
                        entry.name,
                        blob.len()
                    ),
                ));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|_| Error::format(origin, format!("tensor `{}` is not finite", entry.name)))?;
            store.tensors.push((entry.name.clone(), t));
        }
        Ok(store)
    }
}

pub fn blob_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut s = TensorStore::with_meta(json!({"k": 1}));
        s.insert("a", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        s.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        s.save(&path).unwrap();
        let back = TensorStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert!(matches!(back.get("zz"), Err(Error::MissingTensor(_))));
        assert!(matches!(back.expect("a", &[4]), Err(Error::TensorShape { .. })));
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut s = TensorStore::new();
        s.insert("a", Tensor::zeros(vec![8]));
        s.save(&path).unwrap();
        let blob = blob_path_for(&path);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(TensorStore::load(&path), Err(Error::Checksum { .. })));
    }
}
