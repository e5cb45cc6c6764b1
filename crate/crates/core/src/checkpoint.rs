//! Checkpoint container.
//!
//! Layout: the 8-byte magic `OFACKPT1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor listed in the manifest as
//! raw little-endian `f32` values, back to back in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OFACKPT1";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub key: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub arch: ArchSpec,
    /// Last completed phase, if any.
    pub phase: Option<String>,
    /// Caller-defined state.
    pub state: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    /// Values of each manifest tensor, in manifest order.
    pub data: Vec<Vec<f32>>,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new(arch: ArchSpec, phase: Option<String>, state: serde_json::Value) -> Self {
        Self {
            manifest: Manifest {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                arch,
                phase,
                state,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, kind: ParamKind, t: &Tensor) -> Result<()> {
        let key = key.into();
        if self.manifest.tensors.iter().any(|m| m.key == key) {
            return Err(Error::Internal(format!("duplicate checkpoint key {key}")));
        }
        self.manifest.tensors.push(TensorMeta {
            key,
            kind,
            shape: t.shape().to_vec(),
        });
        self.data.push(t.data().to_vec());
        Ok(())
    }

    /// Adds every tensor of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}/{}", p.name), p.kind, &p.tensor)?;
        }
        Ok(())
    }

    /// Rebuilds a store from every tensor under `prefix/`, in saved order.
    pub fn store(&self, prefix: &str) -> Result<ParamStore> {
        let head = format!("{prefix}/");
        let mut store = ParamStore::new();
        for (m, d) in self.manifest.tensors.iter().zip(&self.data) {
            if let Some(name) = m.key.strip_prefix(&head) {
                store.insert(name, m.kind, Tensor::new(m.shape.clone(), d.clone())?)?;
            }
        }
        Ok(store)
    }

    /// Tensor `key` as stored.
    pub fn tensor(&self, key: &str) -> Option<Tensor> {
        let i = self.manifest.tensors.iter().position(|m| m.key == key)?;
        Tensor::new(self.manifest.tensors[i].shape.clone(), self.data[i].clone()).ok()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let floats: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| corrupt(path, "truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| corrupt(path, format!("corrupt manifest: {e}")))?;
        if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(corrupt(
                path,
                format!(
                    "schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                    manifest.schema_version
                ),
            ));
        }
        let mut rest = &bytes[16 + len..];
        let mut data = Vec::with_capacity(manifest.tensors.len());
        for m in &manifest.tensors {
            let n: usize = m.shape.iter().product();
            if rest.len() < 4 * n {
                return Err(corrupt(path, format!("truncated tensor {}", m.key)));
            }
            let (head, tail) = rest.split_at(4 * n);
            data.push(
                head.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(corrupt(path, format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { manifest, data })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}
