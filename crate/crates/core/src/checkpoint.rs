//! Single-file weight checkpoints.
//!
//! Layout: the 8-byte magic `LSEGCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header carrying the
//! model kind, its configuration and every parameter's name and shape, then
//! the raw little-endian `f64` values of all parameters in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"LSEGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<(String, Shape)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize, params: &ParamStore) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            kind: kind.to_string(),
            config,
            params: params.clone(),
        })
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.shape()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut cursor = 20 + len;
        let mut params = ParamStore::default();
        for (name, shape) in header.params {
            let n = shape.numel();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{name}`")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::from_vec(shape, data)?)?;
            cursor += 8 * n;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            params,
        })
    }

    /// Writes through a temporary sibling file and a rename, so an existing
    /// checkpoint at `path` survives a failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies every parameter under `prefix` into `store`; names and shapes
    /// must match. Returns the number of tensors copied.
    pub fn load_prefix(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (_, name, t) in self.params.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: model shape {} differs from checkpoint shape {}",
                    store.get(id).shape(),
                    t.shape()
                )));
            }
            *store.get_mut(id) = t.clone();
            copied += 1;
        }
        if copied == 0 {
            return Err(Error::Checkpoint(format!(
                "checkpoint has no parameters under `{prefix}`"
            )));
        }
        Ok(copied)
    }
}
