//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `IFRPCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then
//! every tensor's values as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{DnConfig, SrnConfig};
use crate::tensor::Tensor;

use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"IFRPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// The epoch whose shuffle is drawn next.
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
    pub srn: SrnConfig,
    pub dn: DnConfig,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors grouped by role (`srn`, `srn_bn`, `dn`, `dn_bn`, `opt_g`,
/// `opt_d`), plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub groups: BTreeMap<String, BTreeMap<String, Tensor>>,
}

impl Checkpoint {
    /// Tensors of one group; a group with no tensors is stored as absent.
    pub fn group(&self, name: &str) -> &BTreeMap<String, Tensor> {
        static EMPTY: BTreeMap<String, Tensor> = BTreeMap::new();
        self.groups.get(name).unwrap_or(&EMPTY)
    }

    /// Rebuilds the tensor index from `groups` and serializes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.format_version = FORMAT_VERSION;
        header.tensors.clear();
        let mut offset = 0;
        let mut data = Vec::new();
        for (group, tensors) in &self.groups {
            for (name, t) in tensors {
                header.tensors.push(TensorEntry {
                    group: group.clone(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &body[hlen..];
        if data.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        let mut expected = 0;
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + len > values.len() {
                return Err(Error::Checkpoint(format!("tensor {}/{} is out of bounds", e.group, e.name)));
            }
            expected += len;
            let t = Tensor::new(&e.shape, values[e.offset..e.offset + len].to_vec())?;
            groups.entry(e.group.clone()).or_default().insert(e.name.clone(), t);
        }
        if expected != values.len() {
            return Err(bad("trailing data after the last tensor"));
        }
        Ok(Checkpoint { header, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
