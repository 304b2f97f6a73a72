//! The `LAFF` checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"LAFF" | u32 version = 1 | u64 header_len | header (UTF-8 JSON) | f32 payloads
//! ```
//!
//! The header holds the model configuration and an ordered manifest of
//! `{name, shape, dtype}` records; payloads follow in manifest order. Entries
//! under `adam.` carry optimizer moments, and the optional `train_state`
//! object carries optimizer counters.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Gate;
use crate::error::{CheckpointError, LaffError, Result};
use crate::model::{FusionVariant, LaffNetModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LAFF";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

/// Prefixes of manifest entries that are not model parameters.
pub const AUX_PREFIXES: [&str; 2] = ["adam.", "extra."];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub gate: Gate,
    #[serde(default)]
    pub variant: FusionVariant,
    #[serde(default = "yes")]
    pub skip_connections: bool,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<serde_json::Value>,
}

fn yes() -> bool {
    true
}

impl Manifest {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.width,
            gate: self.gate,
            variant: self.variant,
            skip_connections: self.skip_connections,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            manifest: Manifest {
                width: config.width,
                gate: config.gate,
                variant: config.variant,
                skip_connections: config.skip_connections,
                tensors: Vec::new(),
                train_state: None,
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.manifest.tensors.push(TensorEntry {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
        });
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.tensors.iter().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let found = bytes.len() as u64;
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated {
                needed: PREAMBLE as u64,
                found,
            }
            .into());
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = PREAMBLE as u64 + header_len;
        if found < header_end {
            return Err(CheckpointError::Truncated {
                needed: header_end,
                found,
            }
            .into());
        }
        let header = &bytes[PREAMBLE..header_end as usize];
        let manifest: Manifest =
            serde_json::from_slice(header).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut needed = header_end;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Header(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)).into());
            }
            if e.shape.is_empty() || e.shape.len() > 4 || e.shape.contains(&0) {
                return Err(CheckpointError::Header(format!("tensor {} has invalid shape {:?}", e.name, e.shape)).into());
            }
            needed += 4 * e.shape.iter().product::<usize>() as u64;
        }
        if found < needed {
            return Err(CheckpointError::Truncated { needed, found }.into());
        }
        if found > needed {
            return Err(CheckpointError::Header(format!("{} trailing bytes after payload", found - needed)).into());
        }

        let mut offset = header_end as usize;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            tensors.push(Tensor::new(&e.shape, data)?);
        }
        Ok(Self { manifest, tensors })
    }

    /// Writes to a sibling temp file, then renames over `path`, so an existing
    /// checkpoint is never left half-written.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Model parameters as checkpoint entries, in store order.
pub fn model_checkpoint(model: &LaffNetModel<f32>) -> Checkpoint {
    let mut ck = Checkpoint::new(model.config);
    for (_, e) in model.params.iter() {
        ck.push(e.name.clone(), e.tensor.clone());
    }
    ck
}

/// Rebuilds the model a checkpoint describes and fills its parameters.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<LaffNetModel<f32>> {
    let mut model = LaffNetModel::<f32>::build(ck.manifest.model_config(), 0)?;
    let index: HashMap<&str, usize> = ck
        .manifest
        .tensors
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.as_str(), i))
        .collect();
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let i = *index
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::ManifestMismatch(format!("missing tensor {name}")))?;
        let expected = model.params.get(id).shape().to_vec();
        if ck.manifest.tensors[i].shape != expected {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor {name} has shape {:?}, model expects {expected:?}",
                ck.manifest.tensors[i].shape
            ))
            .into());
        }
        *model.params.get_mut(id) = ck.tensors[i].clone();
    }
    for e in &ck.manifest.tensors {
        let aux = AUX_PREFIXES.iter().any(|p| e.name.starts_with(p));
        if !aux && model.params.find(&e.name).is_none() {
            return Err(CheckpointError::ManifestMismatch(format!("unexpected tensor {}", e.name)).into());
        }
    }
    Ok(model)
}

impl LaffNetModel<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        model_checkpoint(self).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        model_from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Loads and additionally checks the stored configuration against `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let found = ck.manifest.model_config();
        if found.width != expected.width || found.gate != expected.gate || found.variant != expected.variant {
            return Err(LaffError::Checkpoint(CheckpointError::ManifestMismatch(format!(
                "checkpoint holds width {} / gate {} / {:?}, expected width {} / gate {} / {:?}",
                found.width, found.gate, found.variant, expected.width, expected.gate, expected.variant
            ))));
        }
        model_from_checkpoint(&ck)
    }
}
