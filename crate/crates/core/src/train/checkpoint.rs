use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Metrics, TrainConfig};
use crate::error::{Error, TensorError};
use crate::model::Model;
use crate::tensor::{Parameter, CHECKPOINT_VERSION};

/// File written inside a checkpoint directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// A trained model with the config that produced it. Stored as JSON with
/// shortest round-trip float formatting, so loading is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub num_classes: usize,
    pub epoch: usize,
    pub heldout: Option<Metrics>,
    pub params: Vec<Parameter>,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &TrainConfig, epoch: usize, heldout: Option<Metrics>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            num_classes: model.num_classes,
            epoch,
            heldout,
            params: model.store.to_saved(),
        }
    }

    pub fn to_model(&self) -> crate::Result<Model> {
        let mut model = Model::new(self.config.model_config(), self.num_classes, 0)?;
        model.store.load_saved(&self.params)?;
        Ok(model)
    }

    /// Writes `dir/checkpoint.json`, creating `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> crate::Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CHECKPOINT_FILE);
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a checkpoint from a directory written by [`Checkpoint::save`]
    /// or directly from the JSON file.
    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(CHECKPOINT_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            ))
            .into());
        }
        Ok(ckpt)
    }
}
