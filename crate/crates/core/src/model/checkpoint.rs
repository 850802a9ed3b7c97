//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! file per parameter tensor, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Model;
use crate::dataio::{Granularity, WindowSpec};
use crate::error::{Error, Result};
use crate::substrate::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Data-side settings a checkpoint was trained with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    #[serde(default)]
    pub window_spec: Option<WindowSpec>,
    #[serde(default)]
    pub granularities: Vec<Granularity>,
    #[serde(default)]
    pub channel_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (_, name, t) in model.params().iter() {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        meta: meta.clone(),
        params: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model<f32>, CheckpointMeta)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut model = Model::<f32>::new(manifest.config, manifest.meta.seed)?;
    if manifest.params.len() != model.params().len() {
        return Err(Error::Shape(format!(
            "checkpoint lists {} parameters, architecture has {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .params()
            .id(&entry.name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter `{}` in checkpoint", entry.name)))?;
        let p = dir.join(&entry.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let [r, c] = entry.shape;
        if bytes.len() != r * c * 4 {
            return Err(Error::Shape(format!(
                "{}: {} bytes for shape {:?}",
                p.display(),
                bytes.len(),
                entry.shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        model.params_mut().assign(id, Tensor::from_vec(r, c, data)?)?;
    }
    Ok((model, manifest.meta))
}
