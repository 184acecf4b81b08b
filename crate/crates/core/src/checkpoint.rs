//! Versioned JSON checkpoints.
//!
//! A checkpoint holds the architecture, every weight array by name, the
//! train-partition normalization statistics and the training config
//! (including the seed). Floats are written in shortest round-trip form and
//! parsed back exactly, so save → load is value-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Modality, NormStats};
use crate::model::{ModelConfig, ModelError, Transformer, TransformerWeights};
use crate::tensor::{Tensor, TensorError};
use crate::train::TrainConfig;

pub const FORMAT: &str = "stressformer-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint {format} v{version}")]
    Version { format: String, version: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub modality: Modality,
    pub seed: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub normalization: NormStats,
    pub weights: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(modality: Modality, model: &Transformer, train: &TrainConfig, normalization: NormStats) -> Self {
        let weights = model
            .weights
            .params()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            modality,
            seed: train.seed,
            model_config: model.config().clone(),
            train_config: train.clone(),
            normalization,
            weights,
        }
    }

    pub fn to_model(&self) -> Result<Transformer, CheckpointError> {
        let arrays = self
            .weights
            .iter()
            .map(|a| Ok((a.name.clone(), Tensor::new(&a.shape, a.data.clone())?)))
            .collect::<Result<Vec<_>, TensorError>>()?;
        let weights = TransformerWeights::from_named(&self.model_config, arrays)?;
        Ok(Transformer::from_weights(self.model_config.clone(), weights)?)
    }

    pub fn file_name(modality: Modality) -> String {
        format!("{modality}.ckpt.json")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        Ok(serde_json::to_vec(self)?)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format != FORMAT || ckpt.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                format: ckpt.format,
                version: ckpt.format_version,
            });
        }
        Ok(ckpt)
    }
}

/// Lower-case hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
