use std::fs;
use std::path::Path;

use autograd::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::Vocabulary;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Decoder parameters only, from language-model pretraining.
    Lm,
    /// Every model parameter after joint training.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub dtype: String,
    pub epoch: usize,
    pub config: RunConfig,
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
    pub vocab: Vocabulary,
    pub templates: Vec<String>,
    pub params: Vec<ParamEntry>,
}

/// Manifest plus parameter values.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        kind: CheckpointKind,
        epoch: usize,
        config: RunConfig,
        vocab: Vocabulary,
        templates: Vec<String>,
        store: ParamStore<T>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind,
            dtype: T::DTYPE.to_string(),
            epoch,
            config,
            metrics: None,
            vocab,
            templates,
            params,
        };
        Self { manifest, store }
    }

    /// Writes `manifest.json` and `weights.bin` (little-endian, in manifest order).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.store.num_elements() * T::BYTES);
        for (_, p) in self.store.iter() {
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
        }
        let wpath = dir.join(WEIGHTS);
        fs::write(&wpath, bytes).map_err(|e| Error::io(&wpath, e))?;
        let mpath = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&mpath, e))?;
        fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.dtype != T::DTYPE {
            return Err(Error::Format {
                file: dir.join(MANIFEST).display().to_string(),
                reason: format!("weights are {} but {} was requested", manifest.dtype, T::DTYPE),
            });
        }
        let wpath = dir.join(WEIGHTS);
        let bytes = fs::read(&wpath).map_err(|e| Error::Load { path: wpath.clone(), reason: e.to_string() })?;
        let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>() * T::BYTES;
        if bytes.len() != expected {
            return Err(Error::Format {
                file: wpath.display().to_string(),
                reason: format!("{} bytes, expected {expected}", bytes.len()),
            });
        }
        let mut store = ParamStore::new();
        let mut offset = 0;
        for p in &manifest.params {
            let n: usize = p.shape.iter().product();
            let data = bytes[offset..offset + n * T::BYTES].chunks(T::BYTES).map(T::read_le).collect();
            offset += n * T::BYTES;
            let id = store.add(p.name.clone(), Tensor::new(&p.shape, data));
            store.set_trainable(id, p.trainable);
        }
        Ok(Self { manifest, store })
    }
}

/// Reads and version-checks a manifest.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load { path: path.clone(), reason: e.to_string() })?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let found = raw.get("format_version").and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Format {
        file: path.display().to_string(),
        reason: "missing format_version".into(),
    })?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version { found: found as u32, expected: FORMAT_VERSION });
    }
    serde_json::from_value(raw).map_err(|e| Error::json(&path, e))
}
