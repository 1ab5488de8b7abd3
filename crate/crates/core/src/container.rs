//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SLMS"  u32 version
//! u32 header_len, header_len bytes of UTF-8 JSON
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank × u64 dims, numel × f64 payload
//! 32-byte SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SLMS";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn extend_from_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn store_with_prefix(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.clone());
            }
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("json value serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(64 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt = |msg: &str| Error::Format {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(fmt("missing SLMS magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(Error::Checksum(origin.to_path_buf()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum(origin.to_path_buf()));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let header_len = r.u32().ok_or_else(|| fmt("truncated header length"))? as usize;
        let header_bytes = r.take(header_len).ok_or_else(|| fmt("truncated header"))?;
        let header: Value = serde_json::from_slice(header_bytes)?;
        let count = r.u32().ok_or_else(|| fmt("truncated tensor count"))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| fmt("truncated name"))? as usize;
            let name = r.take(name_len).ok_or_else(|| fmt("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| fmt("name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(|| fmt("truncated rank"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64().ok_or_else(|| fmt("truncated dims"))? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r
                .take(n.checked_mul(8).ok_or_else(|| fmt("tensor too large"))?)
                .ok_or_else(|| fmt("truncated payload"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != body.len() {
            return Err(fmt("trailing bytes after tensor table"));
        }
        Ok(Self { header, tensors })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
