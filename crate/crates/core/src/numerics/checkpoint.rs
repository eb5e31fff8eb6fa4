//! Parameter checkpoints: a versioned binary container of named float64
//! tensors plus string metadata (head kind, partition hash, dimensions).
//!
//! Layout (all integers little-endian), documented byte-by-byte in
//! `docs/FORMATS.md`:
//!
//! ```text
//! "GPNN" | version u32 | meta_count u32
//!   meta_count x { key_len u16 | key utf8 | value_len u32 | value utf8 }
//! param_count u32
//!   param_count x { name_len u16 | name utf8 | ndim u8 | dims u64 x ndim
//!                   | data f64 x prod(dims) }
//! ```

use crate::binio::{self, BinErr, Reader};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GPNN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected GPNN)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated or malformed checkpoint")]
    Malformed,
    #[error("checkpoint contains non-finite parameter data")]
    NonFinite,
    #[error("missing metadata key `{0}`")]
    MissingMeta(String),
    #[error("artifact hash mismatch for `{key}`: expected {expected}, found {found}")]
    HashMismatch {
        key: String,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedParam {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.to_string(),
            shape,
            data,
        }
    }
}

/// An ordered list of metadata pairs and named parameters. Order is part of
/// the byte layout, so serialization is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: &str, value: &str) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta_value(key)
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&NamedParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn require_param(&self, name: &str) -> Result<&NamedParam, CheckpointError> {
        self.param(name)
            .ok_or_else(|| CheckpointError::MissingMeta(format!("param `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        binio::w_u32(&mut out, CHECKPOINT_VERSION);
        binio::w_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            binio::w_u16(&mut out, k.len() as u16);
            out.extend_from_slice(k.as_bytes());
            binio::w_u32(&mut out, v.len() as u32);
            out.extend_from_slice(v.as_bytes());
        }
        binio::w_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            binio::w_u16(&mut out, p.name.len() as u16);
            out.extend_from_slice(p.name.as_bytes());
            binio::w_u8(&mut out, p.shape.len() as u8);
            for &d in &p.shape {
                binio::w_u64(&mut out, d as u64);
            }
            for &v in &p.data {
                binio::w_f64(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let map_err = |e: BinErr| match e {
            BinErr::BadMagic => CheckpointError::BadMagic,
            BinErr::Eof => CheckpointError::Malformed,
        };
        let mut r = Reader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC).map_err(map_err)?;
        let version = r.u32().map_err(map_err)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let meta_count = r.u32().map_err(map_err)?;
        let mut meta = Vec::with_capacity(meta_count as usize);
        for _ in 0..meta_count {
            let klen = r.u16().map_err(map_err)? as usize;
            let key = std::str::from_utf8(r.take(klen).map_err(map_err)?)
                .map_err(|_| CheckpointError::Malformed)?
                .to_string();
            let vlen = r.u32().map_err(map_err)? as usize;
            let value = std::str::from_utf8(r.take(vlen).map_err(map_err)?)
                .map_err(|_| CheckpointError::Malformed)?
                .to_string();
            meta.push((key, value));
        }
        let param_count = r.u32().map_err(map_err)?;
        let mut params = Vec::with_capacity(param_count as usize);
        for _ in 0..param_count {
            let nlen = r.u16().map_err(map_err)? as usize;
            let name = std::str::from_utf8(r.take(nlen).map_err(map_err)?)
                .map_err(|_| CheckpointError::Malformed)?
                .to_string();
            let ndim = r.u8().map_err(map_err)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().map_err(map_err)? as usize);
            }
            let total: usize = shape.iter().product();
            let mut data = Vec::with_capacity(total);
            for _ in 0..total {
                let v = r.f64().map_err(map_err)?;
                if !v.is_finite() {
                    return Err(CheckpointError::NonFinite);
                }
                data.push(v);
            }
            params.push(NamedParam { name, shape, data });
        }
        if !r.is_done() {
            return Err(CheckpointError::Malformed);
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
