//! `model.json` manifest plus `model.bin` little-endian f32 payload.
//!
//! The manifest carries a SHA-256 over its own canonical encoding (with an
//! empty checksum field) and over the payload, so any edit to either file
//! is caught on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{CaptionerModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "model.json";
pub const PAYLOAD: &str = "model.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
    pub checksum: String,
}

impl Manifest {
    fn canonical(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }

    fn self_checksum(&self) -> String {
        let blank = Manifest { checksum: String::new(), ..self.clone() };
        hex::encode(Sha256::digest(blank.canonical()))
    }
}

/// Serialized bytes of the two files.
pub fn encode(model: &CaptionerModel) -> (Vec<u8>, Vec<u8>) {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.store.iter() {
        let offset = payload.len();
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: payload.len() - offset,
        });
    }
    let mut manifest = Manifest {
        version: VERSION,
        config: *model.config(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        checksum: String::new(),
    };
    manifest.checksum = manifest.self_checksum();
    (manifest.canonical(), payload)
}

pub fn save_checkpoint(model: &CaptionerModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, payload) = encode(model);
    fs::write(dir.join(PAYLOAD), payload)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn decode(manifest_bytes: &[u8], payload: &[u8]) -> Result<CaptionerModel> {
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| bad(format!("unreadable manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {} (expected {VERSION})", manifest.version)));
    }
    if manifest.canonical() != manifest_bytes || manifest.self_checksum() != manifest.checksum {
        return Err(bad("manifest checksum mismatch"));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(bad(format!("payload of {} bytes fails its checksum (truncated or corrupt)", payload.len())));
    }
    let mut model = CaptionerModel::new(manifest.config, 0)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(bad(format!(
            "manifest lists {} tensors but the configuration defines {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let names: Vec<String> = model.store.names().to_vec();
    for (i, entry) in manifest.tensors.iter().enumerate() {
        let expected = model.store.tensors()[i].shape().to_vec();
        if entry.name != names[i] || entry.shape != expected {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match `{}` {:?} required by the configuration",
                entry.name, entry.shape, names[i], expected
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.dtype != "f32" || entry.length != 4 * numel || entry.offset + entry.length > payload.len() {
            return Err(bad(format!("tensor `{}` has an invalid extent", entry.name)));
        }
        let data = payload[entry.offset..entry.offset + entry.length]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        model.store.tensors_mut()[i] = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(model)
}

pub fn load_checkpoint(dir: &Path) -> Result<CaptionerModel> {
    let manifest = fs::read(dir.join(MANIFEST))?;
    let payload = fs::read(dir.join(PAYLOAD))?;
    decode(&manifest, &payload)
}

/// Loads a checkpoint and checks it against an expected configuration,
/// naming the first tensor whose shape differs.
pub fn load_compatible(dir: &Path, expected: &ModelConfig) -> Result<CaptionerModel> {
    let model = load_checkpoint(dir)?;
    let reference = CaptionerModel::new(*expected, 0)?;
    for ((name, have), (_, want)) in model.store.iter().zip(reference.store.iter()) {
        if have.shape() != want.shape() {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?} but {:?} is required",
                have.shape(),
                want.shape()
            )));
        }
    }
    if model.store.len() != reference.store.len() || model.config() != expected {
        return Err(bad("checkpoint configuration differs from the requested one"));
    }
    Ok(model)
}
