//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TRJLCKPT"
//! version    u32      1
//! header_len u64
//! header     header_len bytes of JSON (CheckpointHeader)
//! params     f64 × Σ|shape| in header tensor order
//! adam_m     f64 × same count    (only when header.has_optimizer)
//! adam_v     f64 × same count    (only when header.has_optimizer)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ArchConfig, ModelParams, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{LayerSpec, RasterConfig};

pub const MAGIC: &[u8; 8] = b"TRJLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub raster: RasterConfig,
    pub layers: Vec<LayerSpec>,
    pub train_config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub best_validation: bool,
    pub validation_loss: Option<f64>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub raster: RasterConfig,
    pub layers: Vec<LayerSpec>,
    pub train_config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub best_validation: bool,
    pub validation_loss: Option<f64>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            arch: self.params.arch.clone(),
            raster: self.raster.clone(),
            layers: self.layers.clone(),
            train_config_hash: self.train_config_hash.clone(),
            step: self.step,
            epoch: self.epoch,
            best_validation: self.best_validation,
            validation_loss: self.validation_loss,
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                config: a.config,
                step: a.step,
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let scalars = self.params.num_scalars();
        let blocks = if self.optimizer.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(20 + header.len() + 8 * scalars * blocks);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |ts: &[Tensor]| {
            for v in ts.iter().flat_map(|t| &t.data) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(self.params.tensors());
        if let Some(adam) = &self.optimizer {
            put(&adam.m);
            put(&adam.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(source, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a trajlab checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(format!("header: {e}")))?;
        let scalars: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let blocks = if header.optimizer.is_some() { 3 } else { 1 };
        if bytes.len() != body + 8 * scalars * blocks {
            return Err(bad(format!(
                "expected {} bytes of tensor data, found {}",
                8 * scalars * blocks,
                bytes.len() - body
            )));
        }
        let mut cursor = body;
        let mut take = |entries: &[TensorEntry]| -> Vec<Tensor> {
            entries
                .iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let data = bytes[cursor..cursor + 8 * n]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    cursor += 8 * n;
                    Tensor::new(e.shape.clone(), data)
                })
                .collect()
        };
        let tensors = take(&header.tensors);
        let named = header.tensors.iter().map(|e| e.name.clone()).zip(tensors).collect();
        let params = ModelParams::from_tensors(&header.arch, named)?;
        let optimizer = header.optimizer.as_ref().map(|o| {
            let m = take(&header.tensors);
            let v = take(&header.tensors);
            Adam {
                config: o.config,
                step: o.step,
                m,
                v,
            }
        });
        Ok(Checkpoint {
            params,
            raster: header.raster,
            layers: header.layers,
            train_config_hash: header.train_config_hash,
            step: header.step,
            epoch: header.epoch,
            best_validation: header.best_validation,
            validation_loss: header.validation_loss,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// A fresh checkpoint with no training history, for tests and tooling.
pub fn untrained(arch: &ArchConfig, raster: &RasterConfig, layers: &[LayerSpec], seed: u64) -> Result<Checkpoint> {
    Ok(Checkpoint {
        params: ModelParams::init(arch, seed)?,
        raster: raster.clone(),
        layers: layers.to_vec(),
        train_config_hash: String::new(),
        step: 0,
        epoch: 0,
        best_validation: false,
        validation_loss: None,
        optimizer: None,
    })
}
