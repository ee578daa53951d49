//! Binary parameter container.
//!
//! Layout: the magic `MDCK`, a little-endian `u32` version, a `u64` header
//! length, a JSON header listing every tensor with its byte range, then the
//! payload of little-endian `f32` values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub module: String,
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    tensors: Vec<(String, String, Tensor)>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    /// Append every parameter of `store` under `module`.
    pub fn add_store(&mut self, module: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((module.to_string(), name.to_string(), t.clone()));
        }
    }

    pub fn modules(&self) -> Vec<&str> {
        let mut m: Vec<&str> = self.tensors.iter().map(|(m, _, _)| m.as_str()).collect();
        m.dedup();
        m
    }

    pub fn has_module(&self, module: &str) -> bool {
        self.tensors.iter().any(|(m, _, _)| m == module)
    }

    /// Parameters of one module as a fresh store.
    pub fn store(&self, module: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (m, name, t) in &self.tensors {
            if m == module {
                store.add(name.clone(), t.clone());
            }
        }
        if store.is_empty() {
            return Err(Error::ModelMissing(format!("checkpoint has no '{module}' tensors")));
        }
        Ok(store)
    }

    pub fn entries(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(module, name, t)| {
                let len = (t.len() * 4) as u64;
                let e =
                    TensorEntry { module: module.clone(), name: name.clone(), shape: [t.rows, t.cols], dtype: "f32".into(), offset, len };
                offset += len;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { tensors: self.entries(), meta: self.meta.clone() })?;
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(invalid("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(invalid("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| invalid(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        let mut expect = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let [rows, cols] = e.shape;
            if e.dtype != "f32" || e.offset != expect || e.len != (rows * cols * 4) as u64 {
                return Err(invalid(format!("entry {}/{} does not tile the payload", e.module, e.name)));
            }
            let end = (e.offset + e.len) as usize;
            if end > payload.len() {
                return Err(invalid(format!("entry {}/{} runs past the payload", e.module, e.name)));
            }
            let data = payload[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((e.module.clone(), e.name.clone(), Tensor::from_vec(rows, cols, data)));
            expect += e.len;
        }
        if expect as usize != payload.len() {
            return Err(invalid("payload has trailing bytes"));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
