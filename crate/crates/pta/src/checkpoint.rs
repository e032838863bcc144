//! Checkpoints: a self-describing JSON container holding the model config,
//! an append-only provenance log of the run configs that produced the
//! weights, and every named parameter blob (row-major 64-bit floats).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::{read_json, write_json, DataError, DataResult};
use crate::model::PtaModel;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Run-config echoes, in order: corpus generation, training, finetuning.
    pub provenance: Vec<serde_json::Value>,
    pub params: Vec<ParamBlob>,
}

impl Checkpoint {
    pub fn of(model: &PtaModel, provenance: Vec<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: model.config.clone(),
            provenance,
            params: model
                .store
                .iter()
                .map(|(_, name, shape, data)| ParamBlob {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    data: data.to_vec(),
                })
                .collect(),
        }
    }
}

pub fn save_checkpoint(
    model: &PtaModel,
    provenance: Vec<serde_json::Value>,
    path: &Path,
) -> DataResult<()> {
    write_json(path, &Checkpoint::of(model, provenance))
}

/// Restores a model from a checkpoint file. Every stored blob must match a
/// registered parameter by name and shape, and vice versa.
pub fn load_checkpoint(path: &Path) -> DataResult<(PtaModel, Vec<serde_json::Value>)> {
    let ckpt: Checkpoint = read_json(path)?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(DataError::schema(
            path,
            format!(
                "format version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            ),
        ));
    }
    let mut model = PtaModel::new(ckpt.model.clone(), 0)
        .map_err(|e| DataError::schema(path, e.to_string()))?;
    if ckpt.params.len() != model.store.len() {
        return Err(DataError::schema(
            path,
            format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.store.len()
            ),
        ));
    }
    for blob in &ckpt.params {
        let id = model.store.find(&blob.name).ok_or_else(|| {
            DataError::schema(path, format!("unknown parameter '{}'", blob.name))
        })?;
        if model.store.shape(id) != blob.shape.as_slice() {
            return Err(DataError::schema(
                path,
                format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    blob.name,
                    blob.shape,
                    model.store.shape(id)
                ),
            ));
        }
        model.store.value_mut(id).copy_from_slice(&blob.data);
    }
    Ok((model, ckpt.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ActionSpace;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("pta_ckpt_test");
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = ModelConfig {
            d_word: 8,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_feat: 6,
            grid_cols: 2,
            ..ModelConfig::desk()
        };
        let model = PtaModel::new(cfg, 99).unwrap();
        let path = dir.join("model.ckpt.json");
        let echo = serde_json::json!({"command": "train", "seed": 3});
        save_checkpoint(&model, vec![echo.clone()], &path).unwrap();

        let (loaded, provenance) = load_checkpoint(&path).unwrap();
        assert_eq!(provenance, vec![echo]);
        assert_eq!(loaded.config, model.config);
        for id in model.store.ids() {
            assert_eq!(
                model.store.value(id),
                loaded.store.value(id),
                "parameter {} must round-trip bit-exactly",
                model.store.name(id)
            );
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn low_checkpoint_has_no_high_head() {
        let cfg = ModelConfig {
            d_word: 8,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            d_feat: 6,
            grid_cols: 2,
            ..ModelConfig::desk()
        };
        let model = PtaModel::new(cfg, 1).unwrap();
        assert!(model.has_head(ActionSpace::Low));
        assert!(!model.has_head(ActionSpace::High));
    }
}
