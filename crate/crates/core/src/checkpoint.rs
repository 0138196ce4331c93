//! Checkpoints: a safetensors container of named f32 arrays plus a JSON
//! manifest echoing the model configuration and training provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "rankpyr-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// File name of the array container, relative to the manifest.
    pub arrays: String,
    /// SHA-256 of the array container bytes.
    pub sha256: String,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (training config, optimizer settings, step).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn encode_arrays(model: &Model) -> Result<(Vec<u8>, Vec<TensorEntry>)> {
    let state = model.state()?;
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = state
        .into_iter()
        .map(|(name, (shape, values))| {
            let raw = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name, shape, raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, raw)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::InvalidInput(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let encoded = safetensors::tensor::serialize(views, None)
        .map_err(|e| Error::InvalidInput(format!("serializing checkpoint: {e}")))?;
    let entries = bytes
        .iter()
        .map(|(name, shape, _)| TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "F32".into(),
        })
        .collect();
    Ok((encoded, entries))
}

pub fn decode_arrays(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
    let st = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::InvalidInput(format!(
                "{}: tensor {name} has dtype {:?}, expected F32",
                path.display(),
                view.dtype()
            )));
        }
        let values = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, (view.shape().to_vec(), values));
    }
    Ok(out)
}

/// Writes `<dir>/<stem>.safetensors` and `<dir>/<stem>.json`; returns the
/// manifest path.
pub fn save_checkpoint(
    model: &Model,
    dir: &Path,
    stem: &str,
    provenance: serde_json::Value,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let (bytes, tensors) = encode_arrays(model)?;
    let arrays = format!("{stem}.safetensors");
    let array_path = dir.join(&arrays);
    std::fs::write(&array_path, &bytes)
        .map_err(|e| Error::io(format!("writing {}", array_path.display()), e))?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        arrays,
        sha256: hex::encode(Sha256::digest(&bytes)),
        model_config: model.config().clone(),
        tensors,
        provenance,
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// Loads a checkpoint from its manifest path, verifying the array digest.
pub fn load_checkpoint(manifest_path: &Path, dtype: DType) -> Result<(Model, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(manifest_path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported checkpoint format '{}'",
            manifest_path.display(),
            manifest.format
        )));
    }
    let array_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.arrays);
    let bytes = std::fs::read(&array_path)
        .map_err(|e| Error::io(format!("reading {}", array_path.display()), e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(Error::InvalidInput(format!(
            "{}: digest mismatch (manifest {}, file {digest})",
            array_path.display(),
            manifest.sha256
        )));
    }
    let model = Model::new(manifest.model_config.clone(), 0, dtype)?;
    model.load_named(&decode_arrays(&bytes, &array_path)?, true)?;
    Ok((model, manifest))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::toy(), 9, DType::F32).unwrap();
        let path = save_checkpoint(&model, dir.path(), "ckpt", serde_json::json!({"step": 3})).unwrap();
        let (loaded, manifest) = load_checkpoint(&path, DType::F32).unwrap();
        assert_eq!(loaded.digest().unwrap(), model.digest().unwrap());
        assert_eq!(manifest.provenance["step"], 3);
        assert_eq!(manifest.tensors.len(), model.named_params().len());
    }

    #[test]
    fn encoding_is_stable() {
        let model = Model::new(ModelConfig::toy(), 4, DType::F32).unwrap();
        let (a, _) = encode_arrays(&model).unwrap();
        let (b, _) = encode_arrays(&model).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_arrays_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::toy(), 1, DType::F32).unwrap();
        let path = save_checkpoint(&model, dir.path(), "m", serde_json::Value::Null).unwrap();
        let arrays = dir.path().join("m.safetensors");
        let mut bytes = std::fs::read(&arrays).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&arrays, bytes).unwrap();
        assert!(load_checkpoint(&path, DType::F32).is_err());
    }

    #[test]
    fn partial_pretrained_load() {
        let dir = tempfile::tempdir().unwrap();
        let source = Model::new(ModelConfig::toy(), 1, DType::F32).unwrap();
        save_checkpoint(&source, dir.path(), "src", serde_json::Value::Null).unwrap();
        let target = Model::new(ModelConfig::toy(), 2, DType::F32).unwrap();
        let loaded = target.load_pretrained(&dir.path().join("src.safetensors")).unwrap();
        assert_eq!(loaded.len(), source.named_params().len());
        assert_eq!(target.digest().unwrap(), source.digest().unwrap());
    }
}
