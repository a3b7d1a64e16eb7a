//! Checkpoint directory: `manifest.json` (config, tensor names, kinds,
//! shapes, seed, step) and `tensors.f32`, the concatenation of every tensor
//! as little-endian `f32` in manifest order, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "eegfm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    /// Task-specific settings (classifier head, adapters).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Same config, names, kinds and shapes.
    pub fn compatible_with(&self, other: &Manifest) -> std::result::Result<(), String> {
        if self.config != other.config {
            return Err("model configs differ".into());
        }
        if self.extra != other.extra {
            return Err("task settings differ".into());
        }
        if self.tensors != other.tensors {
            let diff = self
                .tensors
                .iter()
                .zip(&other.tensors)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("{} vs {} tensors", self.tensors.len(), other.tensors.len()));
            return Err(format!("tensor lists differ: {diff}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamSet<f32>, seed: u64, step: u64, extra: serde_json::Value) -> Self {
        let tensors = params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape(),
            })
            .collect();
        Self {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                config,
                seed,
                step,
                extra,
                tensors,
            },
            params,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.params.n_elements() * 4);
        for p in self.params.iter() {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let payload = dir.join(PAYLOAD_FILE);
        fs::write(&payload, &bytes).map_err(|e| Error::io(&payload, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Manifest(format!(
                "{}: unsupported format {} v{}",
                mpath.display(),
                manifest.format,
                manifest.version
            )));
        }
        let ppath = dir.join(PAYLOAD_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let expected: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Manifest(format!(
                "{}: {} payload bytes, manifest implies {expected}",
                ppath.display(),
                bytes.len()
            )));
        }
        let mut params = ParamSet::new();
        let mut off = 0;
        for t in &manifest.tensors {
            let n = t.shape[0] * t.shape[1];
            let data: Vec<f32> = bytes[off..off + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            off += n * 4;
            params.insert(t.name.clone(), t.kind, Tensor::from_vec(t.shape[0], t.shape[1], data))?;
        }
        if !params.all_finite() {
            return Err(Error::NonFinite(format!("{} contains non-finite weights", ppath.display())));
        }
        Ok(Self { manifest, params })
    }
}
