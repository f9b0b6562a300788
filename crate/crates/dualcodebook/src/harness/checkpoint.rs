//! JSON checkpoints: configuration, parameters, usage counters, optimizer
//! moments, and the data-order RNG position.
//!
//! Serialization is canonical — fixed field order, shortest-round-trip float
//! formatting — so saving, loading, and saving again reproduces the file
//! byte for byte.

use super::optim::AdamState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter tensor, stored flat as `{name, shape, data}`.
///
/// The fields are spelled out rather than embedding a [`Tensor`] behind
/// `#[serde(flatten)]`: explicit fields serialize in a guaranteed order and
/// deserialize through the direct value path instead of serde's internal
/// content buffer, keeping the canonical-bytes property easy to reason
/// about.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamEntry {
    fn from_tensor(name: &str, tensor: &Tensor) -> ParamEntry {
        ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
            .map_err(|e| Error::data(format!("parameter '{}' is malformed: {e}", self.name)))
    }
}

/// Per-site codebook usage counters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UsageState {
    pub encoder: Vec<u64>,
    pub decoder: Vec<u64>,
}

/// Position of the training data-order RNG, for reproducible continuation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub usage: UsageState,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    /// Captures a model (and optionally trainer state) as a checkpoint.
    pub fn from_model(
        model: &Model,
        epoch: usize,
        optimizer: Option<AdamState>,
        rng: Option<RngState>,
    ) -> Checkpoint {
        let params = model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry::from_tensor(name, t))
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            epoch,
            params,
            usage: UsageState {
                encoder: model.usage_encoder().to_vec(),
                decoder: model.usage_decoder().to_vec(),
            },
            optimizer,
            rng,
        }
    }

    /// Rebuilds the model, validating the parameter list against the
    /// embedded configuration.
    pub fn to_model(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for entry in &self.params {
            store.insert(&entry.name, entry.to_tensor()?)?;
        }
        Model::from_parts(
            self.config.clone(),
            store,
            self.usage.encoder.clone(),
            self.usage.decoder.clone(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("cannot serialize checkpoint: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("invalid checkpoint {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint version {} is not supported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        ckpt.config.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationConfig, ModelConfig};

    fn tiny_model() -> Model {
        Model::init(&AblationConfig::E.apply(&ModelConfig::tiny())).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt.json");
        let p2 = dir.path().join("b.ckpt.json");
        let ckpt = Checkpoint::from_model(&model, 3, None, Some(RngState { seed: 7, word_pos: 99 }));
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "round-tripped checkpoint must serialize identically");
    }

    #[test]
    fn model_survives_the_round_trip_bitwise() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt.json");
        Checkpoint::from_model(&model, 0, None, None).save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(&model, &restored, "parameters, config, and usage must match bitwise");
    }

    #[test]
    fn tampered_parameter_lists_are_rejected() {
        let model = tiny_model();
        let mut ckpt = Checkpoint::from_model(&model, 0, None, None);
        ckpt.params.pop();
        let err = ckpt.to_model().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unsupported_version_is_a_data_error() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt.json");
        let mut ckpt = Checkpoint::from_model(&model, 0, None, None);
        ckpt.version = 999;
        ckpt.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/nowhere.json")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let model = tiny_model();
        let zeros: Vec<Tensor> = model
            .params()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let state = AdamState { t: 42, m: zeros.clone(), v: zeros };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ckpt.json");
        Checkpoint::from_model(&model, 1, Some(state.clone()), None).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.optimizer.as_ref(), Some(&state));
    }
}
