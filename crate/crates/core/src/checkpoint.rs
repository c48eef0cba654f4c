//! Model checkpoints as a single safetensors container: every parameter as a
//! little-endian f32 tensor under its store name, plus the model config and a
//! schema version in the header metadata. The metadata is one JSON entry so
//! the header bytes do not depend on hash-map ordering.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tape::ParamStore;

pub const SCHEMA_VERSION: &str = "1";
const METADATA_KEY: &str = "eyecue";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: String,
    config: ModelConfig,
}

fn checkpoint_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn to_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    serialize(&params.store, &params.config)
}

fn serialize(store: &ParamStore<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, name, value)| {
            let bytes = value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), value.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(checkpoint_err)
        })
        .collect::<Result<Vec<_>>>()?;
    let header = Header {
        schema_version: SCHEMA_VERSION.to_string(),
        config: config.clone(),
    };
    let metadata = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&header)?)]);
    safetensors::serialize(views, &Some(metadata)).map_err(checkpoint_err)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(checkpoint_err)?;
    let metadata = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
    let raw = metadata
        .get(METADATA_KEY)
        .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
    let header: Header = serde_json::from_str(raw)
        .map_err(|e| Error::Checkpoint(format!("invalid checkpoint header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {}, expected {SCHEMA_VERSION}",
            header.schema_version
        )));
    }
    let config = header.config;
    let mut params = init_params::<f32>(&config, 0)?;
    let tensors = SafeTensors::deserialize(bytes).map_err(checkpoint_err)?;
    let stored: Vec<String> = tensors.names().into_iter().cloned().collect();
    if let Some(extra) = stored.iter().find(|n| params.store.id(n).is_none()) {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let name = params.store.name(id).to_string();
        let view = tensors
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
        let target = params.store.get_mut(id);
        if view.dtype() != Dtype::F32 || view.shape() != target.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} is {:?} {:?}, expected F32 {:?}",
                view.dtype(),
                view.shape(),
                target.shape()
            )));
        }
        for (dst, chunk) in target.iter_mut().zip(view.data().chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    if !params.store.all_finite() {
        return Err(Error::Checkpoint("checkpoint contains non-finite values".into()));
    }
    Ok(params)
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Branches;

    fn config() -> ModelConfig {
        ModelConfig {
            frames_per_clip: 4,
            encoder_input_size: 32,
            patch_size: 8,
            embed_dim: 16,
            gaze_heads: 4,
            gdsq_heads: 4,
            branches: Branches::new(true, false, true),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let params = init_params::<f32>(&config(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(to_bytes(&loaded).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_mismatched_tensors_and_garbage() {
        let params = init_params::<f32>(&config(), 9).unwrap();
        let mut wider = config();
        wider.embed_dim = 32;
        let err = from_bytes(&serialize(&params.store, &wider).unwrap()).unwrap_err();
        assert!(err.to_string().contains("expected F32"), "{err}");

        let mut extra = params.store.clone();
        extra.add("stray", ndarray::Array2::zeros((1, 1)));
        let err = from_bytes(&serialize(&extra, &config()).unwrap()).unwrap_err();
        assert!(err.to_string().contains("unexpected tensor stray"), "{err}");

        let mut full = config();
        full.branches = Branches::FULL;
        let err = from_bytes(&serialize(&params.store, &full).unwrap()).unwrap_err();
        assert!(err.to_string().contains("tensor head.hidden.weight"), "{err}");

        assert!(matches!(
            from_bytes(b"not a checkpoint"),
            Err(Error::Checkpoint(_))
        ));
    }
}
