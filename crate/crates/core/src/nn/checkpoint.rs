//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "TCLABCK1"
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON: {config, metadata, tensors: [{name, shape}]}
//! payload  every tensor's values as little-endian f32, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkConfig};
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 8] = b"TCLABCK1";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default)]
    pub val_loss: Option<f64>,
    /// Mode-specific monitored metric (e.g. top-5 agreement).
    #[serde(default)]
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub seed: u64,
    /// Epoch (1-based) the parameters were taken from.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub parameters: Vec<(String, Tensor<f32>)>,
    pub metadata: CheckpointMetadata,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    metadata: CheckpointMetadata,
    tensors: Vec<TensorHeader>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, metadata: CheckpointMetadata) -> Self {
        Self {
            config: *net.config(),
            parameters: net.params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            metadata,
        }
    }

    /// Rebuilds the network; parameter names and shapes must match the config.
    pub fn to_network(&self) -> Result<Network<f32>, NnError> {
        let mut net = Network::<f32>::zeros(self.config)?;
        let names = net.param_names();
        if names.len() != self.parameters.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                self.parameters.len()
            )));
        }
        for ((slot, _), (name, (ck_name, value))) in
            net.params_mut().into_iter().zip(names.iter().zip(&self.parameters))
        {
            if name != ck_name || slot.shape() != value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {ck_name} {:?} does not fit {name} {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(net)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.parameters.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config,
            metadata: self.metadata.clone(),
            tensors: self
                .parameters
                .iter()
                .map(|(n, t)| TensorHeader {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let payload: usize = self.parameters.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.parameters {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let err = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut payload = &body[hlen..];
        let mut parameters = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if payload.len() < n * 4 {
                return Err(err("truncated payload"));
            }
            let data = payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payload = &payload[n * 4..];
            parameters.push((t.name, Tensor::new(t.shape, data)?));
        }
        if !payload.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            parameters,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path.as_ref(), self.to_bytes()).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let bytes = fs::read(path.as_ref()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}
