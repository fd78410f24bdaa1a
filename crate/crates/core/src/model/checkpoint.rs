//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 8            | magic `N2V2CKPT`                               |
//! | 4            | `u32` format version (currently 1)             |
//! | 8            | `u64` length `L` of the JSON header            |
//! | `L`          | UTF-8 JSON header (see [`Header`])             |
//! | rest         | parameter data, `f32` little-endian            |
//!
//! The header lists every tensor with its name, shape and element offset
//! into the data section, next to the model config, the normalization
//! statistics and free-form training metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{ModelConfig, Param, UNet};
use crate::data::NormStats;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"N2V2CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub norm: NormStats,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// A trained network with everything needed to apply it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: UNet,
    pub norm: NormStats,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .net
            .params()
            .iter()
            .map(|p| {
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                };
                offset += p.data.len();
                e
            })
            .collect();
        let header = Header {
            model: *self.net.config(),
            norm: self.norm,
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.net.params() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("<checkpoint>", m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let data = &bytes[20 + len..];
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = data
                .get(t.offset * 4..(t.offset + n) * 4)
                .ok_or_else(|| bad(&format!("tensor {} out of bounds", t.name)))?;
            params.push(Param {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            });
        }
        let mut net = UNet::zeros(header.model)?;
        net.load_params(params)?;
        Ok(Self {
            net,
            norm: header.norm,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path, message),
            other => other,
        })
    }
}
