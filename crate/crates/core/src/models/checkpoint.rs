//! Portable checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "DFCK"
//! version      u32      FORMAT_VERSION
//! config_len   u32
//! config       config_len bytes of compact UTF-8 JSON
//!              {"kind":"dense"|"moe","config":{..},"moe":null|{..}}
//! n_tensors    u32
//! manifest     n_tensors × { name_len u32, name bytes, rank u32, dims u64 × rank }
//! payload      f64 values of every tensor, manifest order, row-major
//! ```
//!
//! The serialized length `|m|` is what the communication ledger charges
//! for an upload.

use super::config::{LmConfig, MoeSpec};
use super::params::{param_layout, ParamSet};
use super::transformer::{DenseLm, LanguageModel, MoeLm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: LmConfig,
    moe: Option<MoeSpec>,
}

/// A checkpoint of either model kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Dense(DenseLm),
    Moe(MoeLm),
}

pub trait Checkpoint: LanguageModel {
    fn to_bytes(&self) -> Vec<u8> {
        encode(self.config(), self.moe(), self.params())
    }

    fn save(&self, path: &Path) -> Result<usize> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(bytes.len())
    }
}

impl Checkpoint for DenseLm {}
impl Checkpoint for MoeLm {}

/// Byte length of the container header (everything before the payload).
pub fn header_len(config: &LmConfig, moe: Option<&MoeSpec>) -> usize {
    let json = config_json(config, moe);
    let manifest: usize = param_layout(config, moe)
        .iter()
        .map(|(n, s)| 4 + n.len() + 4 + 8 * s.len())
        .sum();
    4 + 4 + 4 + json.len() + 4 + manifest
}

fn config_json(config: &LmConfig, moe: Option<&MoeSpec>) -> Vec<u8> {
    let header = Header {
        kind: if moe.is_some() { "moe" } else { "dense" }.to_string(),
        config: config.clone(),
        moe: moe.copied(),
    };
    serde_json::to_vec(&header).expect("config serializes")
}

fn encode(config: &LmConfig, moe: Option<&MoeSpec>, params: &ParamSet) -> Vec<u8> {
    let json = config_json(config, moe);
    let mut out = Vec::with_capacity(header_len(config, moe) + 8 * params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a container and validates its manifest against the layout the
/// embedded config implies.
pub fn load(bytes: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let json_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
    header.config.validate()?;
    let moe = match (header.kind.as_str(), header.moe) {
        ("dense", None) => None,
        ("moe", Some(m)) => {
            m.validate()?;
            Some(m)
        }
        (k, _) => return Err(Error::Format(format!("inconsistent model kind `{k}`"))),
    };
    let layout = param_layout(&header.config, moe.as_ref());
    let n = r.u32()? as usize;
    if n != layout.len() {
        return Err(Error::Format(format!(
            "manifest lists {n} tensors, config implies {}",
            layout.len()
        )));
    }
    let mut manifest = Vec::with_capacity(n);
    for (want_name, want_shape) in &layout {
        let name_len = r.u32()? as usize;
        let name =
            std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != want_name || &shape != want_shape {
            return Err(Error::Format(format!(
                "manifest entry {name} {shape:?} does not match {want_name} {want_shape:?}"
            )));
        }
        manifest.push((name.to_string(), shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in manifest {
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(match moe {
        None => AnyModel::Dense(DenseLm::from_params(header.config, params)?),
        Some(m) => AnyModel::Moe(MoeLm::from_params(header.config, m, params)?),
    })
}

pub fn load_file(path: &Path) -> Result<AnyModel> {
    load(&std::fs::read(path)?)
}

impl AnyModel {
    pub fn into_dense(self) -> Result<DenseLm> {
        match self {
            AnyModel::Dense(m) => Ok(m),
            AnyModel::Moe(_) => Err(Error::Format("expected a dense checkpoint".into())),
        }
    }

    pub fn into_moe(self) -> Result<MoeLm> {
        match self {
            AnyModel::Moe(m) => Ok(m),
            AnyModel::Dense(_) => Err(Error::Format("expected an MoE checkpoint".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyModel::Dense(m) => m.to_bytes(),
            AnyModel::Moe(m) => m.to_bytes(),
        }
    }
}
