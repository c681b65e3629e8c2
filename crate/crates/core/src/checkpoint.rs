//! Single-file checkpoint: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every array as raw little-endian `f64` in
//! header order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{HcpGrads, HcpLayerParams};
use crate::backbone::BackboneDescriptor;
use crate::error::{HcpError, Result};
use crate::objectives::LayerId;
use crate::training::{AdamState, TrainingConfig};

pub const MAGIC: &[u8; 8] = b"HCPCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed training steps.
    pub step: u64,
    pub descriptor_hash: String,
    pub descriptor: BackboneDescriptor,
    pub config: TrainingConfig,
    pub gamma: f64,
    pub layers: BTreeMap<LayerId, HcpLayerParams>,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    descriptor_hash: String,
    descriptor: BackboneDescriptor,
    config: TrainingConfig,
    gamma: f64,
    layers: Vec<LayerId>,
    adam_t: Option<u64>,
    arrays: Vec<ArrayHeader>,
}

fn grads_as_params(g: &HcpGrads) -> HcpLayerParams {
    HcpLayerParams {
        blocks: g.blocks.clone(),
        trainable: true,
    }
}

fn params_as_grads(p: HcpLayerParams) -> HcpGrads {
    HcpGrads { blocks: p.blocks }
}

impl Checkpoint {
    fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, id: &LayerId, p: &HcpLayerParams| {
            for (name, shape, data) in p.flat_arrays() {
                out.push((format!("{prefix}/{id}/{name}"), shape, data));
            }
        };
        for (id, p) in &self.layers {
            push("hcp", id, p);
        }
        if let Some(opt) = &self.optimizer {
            for (id, g) in &opt.m {
                push("adam_m", id, &grads_as_params(g));
            }
            for (id, g) in &opt.v {
                push("adam_v", id, &grads_as_params(g));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.named_arrays();
        let header = Header {
            step: self.step,
            descriptor_hash: self.descriptor_hash.clone(),
            descriptor: self.descriptor.clone(),
            config: self.config.clone(),
            gamma: self.gamma,
            layers: self.layers.keys().cloned().collect(),
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            arrays: arrays
                .iter()
                .map(|(name, shape, _)| ArrayHeader {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + arrays.iter().map(|a| a.2.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HcpError::Validation(format!("malformed checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut offset = 16 + len;
        let mut groups: BTreeMap<(String, LayerId), Vec<(String, Vec<usize>, Vec<f64>)>> = BTreeMap::new();
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = bytes
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad(&format!("truncated array `{}`", a.name)))?;
            offset += n * 8;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mut parts = a.name.splitn(3, '/');
            let (Some(prefix), Some(layer), Some(name)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(&format!("array name `{}`", a.name)));
            };
            groups
                .entry((prefix.to_string(), LayerId::new(layer)))
                .or_default()
                .push((name.to_string(), a.shape.clone(), data));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut layers = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for ((prefix, id), arrays) in groups {
            let p = HcpLayerParams::from_flat_arrays(&arrays)?;
            match prefix.as_str() {
                "hcp" => {
                    layers.insert(id, p);
                }
                "adam_m" => {
                    m.insert(id, params_as_grads(p));
                }
                "adam_v" => {
                    v.insert(id, params_as_grads(p));
                }
                other => return Err(bad(&format!("unknown array group `{other}`"))),
            }
        }
        if layers.keys().ne(header.layers.iter()) {
            return Err(bad("layer table does not match stored arrays"));
        }
        let optimizer = header.adam_t.map(|t| AdamState { t, m, v });
        Ok(Self {
            step: header.step,
            descriptor_hash: header.descriptor_hash,
            descriptor: header.descriptor,
            config: header.config,
            gamma: header.gamma,
            layers,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| HcpError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| HcpError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HcpError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
