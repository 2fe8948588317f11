//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "RLLIECKP"
//! version    u32
//! manifest   u32 length, then that many bytes of JSON
//! tensors    f32 values, tensor by tensor in manifest order
//! ```
//!
//! The manifest records the agent configuration, the training configuration
//! and the name and shape of every tensor. Shapes are validated against the
//! agent configuration before any tensor data is read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig};
use crate::error::{Error, Result};
use crate::nn::{ConvLayerParams, Tensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RLLIECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    agent: AgentConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
}

/// A trained agent together with the configuration it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub agent: Agent,
    pub train: TrainConfig,
}

fn tensor_names(agent: &Agent) -> Vec<String> {
    let n_enc = agent.config().layers - 2;
    (0..agent.config().layers)
        .flat_map(|i| {
            let layer = if i < n_enc {
                format!("encoder.{i}")
            } else if i == n_enc {
                "policy".to_string()
            } else {
                "value".to_string()
            };
            [format!("{layer}.kernel"), format!("{layer}.bias")]
        })
        .collect()
}

pub fn encode_checkpoint(agent: &Agent, train: &TrainConfig) -> Result<Vec<u8>> {
    let tensors = tensor_names(agent)
        .into_iter()
        .zip(agent.tensor_shapes())
        .map(|(name, shape)| TensorEntry { name, shape })
        .collect();
    let manifest = Manifest {
        agent: *agent.config(),
        train: train.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for layer in agent.layers() {
        for t in [&layer.kernel, &layer.bias] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    manifest.agent.validate()?;

    let expected: Vec<Vec<usize>> = manifest
        .agent
        .layer_shapes()
        .iter()
        .flat_map(|s| [s.to_vec(), vec![s[0]]])
        .collect();
    if manifest.tensors.len() != expected.len() {
        return Err(Error::CheckpointShape(format!(
            "manifest lists {} tensors, configuration needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for (entry, want) in manifest.tensors.iter().zip(&expected) {
        if &entry.shape != want {
            return Err(Error::CheckpointShape(format!(
                "{}: manifest says {:?}, configuration needs {:?}",
                entry.name, entry.shape, want
            )));
        }
    }

    let data = &body[len..];
    let total: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    if data.len() != total * 4 {
        return Err(corrupt(&format!(
            "tensor data is {} bytes, manifest needs {}",
            data.len(),
            total * 4
        )));
    }
    let mut values = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let mut tensors = Vec::with_capacity(expected.len());
    for shape in &expected {
        let n = shape.iter().product();
        let v: Vec<f32> = values.by_ref().take(n).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(corrupt("non-finite parameter"));
        }
        tensors.push(Tensor::new(shape.clone(), v)?);
    }
    let mut layers = Vec::with_capacity(expected.len() / 2);
    let mut it = tensors.into_iter();
    while let (Some(k), Some(b)) = (it.next(), it.next()) {
        layers.push(ConvLayerParams::new(k, b)?);
    }
    Ok(Checkpoint {
        agent: Agent::from_layers(manifest.agent, layers)?,
        train: manifest.train,
    })
}

pub fn save_checkpoint(agent: &Agent, train: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(agent, train)?;
    let path = path.as_ref();
    // write-then-rename so periodic saves never leave a half-written file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?)
}
