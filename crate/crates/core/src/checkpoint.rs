//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "RCKPT\0\0\0"
//! version   u32
//! length    u64       byte length of the manifest
//! manifest  JSON      configs, progress, history, tensor table, payload digest
//! payload   f64 LE    tensors back to back, in tensor-table order
//! ```

use std::fs;
use std::path::Path;

use rangecast_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::SensorModel;
use crate::network::{ModelConfig, Network};
use crate::nn::{ParamStore, Slot};
use crate::training::{AdamState, EpochRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"RCKPT\0\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub sensor: SensorModel,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub adam_steps: u64,
    tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub sensor: SensorModel,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub weights: ParamStore,
    pub optimizer: Option<AdamState>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, kind: TensorKind, t: &Tensor| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (n, t) in self.weights.params() {
            push(n, TensorKind::Param, t);
        }
        for (n, t) in self.weights.buffers() {
            push(n, TensorKind::Buffer, t);
        }
        let mut adam_steps = 0;
        if let Some(opt) = &self.optimizer {
            adam_steps = opt.steps;
            for (n, t) in &opt.m {
                push(n, TensorKind::AdamM, t);
            }
            for (n, t) in &opt.v {
                push(n, TensorKind::AdamV, t);
            }
        }
        let manifest = Manifest {
            model: self.model.clone(),
            sensor: self.sensor,
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            history: self.history.clone(),
            adam_steps,
            tensors,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses the header and manifest only.
    pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Incompatible {
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let rest = &bytes[20..];
        if rest.len() < len {
            return Err(Error::Format("checkpoint truncated inside the manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..len])
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        Ok((manifest, &rest[len..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = Self::read_manifest(bytes)?;
        let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Format(format!(
                "checkpoint payload has {} bytes, manifest describes {}",
                payload.len(),
                total * 8
            )));
        }
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(Error::Format("checkpoint payload digest mismatch".into()));
        }
        let mut weights = ParamStore::default();
        let mut optimizer = AdamState {
            steps: manifest.adam_steps,
            ..AdamState::default()
        };
        let mut has_optimizer = false;
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset.checked_add(n).filter(|&e| e <= total);
            let Some(end) = end else {
                return Err(Error::Format(format!("tensor {} lies outside the payload", entry.name)));
            };
            let data = payload[entry.offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&entry.shape, data);
            match entry.kind {
                TensorKind::Param => weights.insert(Slot::Param, entry.name.clone(), t),
                TensorKind::Buffer => weights.insert(Slot::Buffer, entry.name.clone(), t),
                TensorKind::AdamM => {
                    has_optimizer = true;
                    optimizer.m.insert(entry.name.clone(), t);
                }
                TensorKind::AdamV => {
                    has_optimizer = true;
                    optimizer.v.insert(entry.name.clone(), t);
                }
            }
        }
        Ok(Self {
            model: manifest.model,
            sensor: manifest.sensor,
            train: manifest.train,
            epoch: manifest.epoch,
            step: manifest.step,
            history: manifest.history,
            weights,
            optimizer: (has_optimizer || manifest.adam_steps > 0).then_some(optimizer),
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Weights checked against a network built from `model`.
    pub fn weights_for(&self, net: &Network) -> Result<&ParamStore> {
        self.weights.check(&net.specs())?;
        Ok(&self.weights)
    }
}
