use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelSpec, ToyModel};
use crate::id::WeightMatrixId;
use crate::numerics::DenseMatrix;

pub const MODEL_FORMAT: &str = "slora-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// JSON document holding a full model, its spec, and its seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelCheckpoint {
    format: String,
    version: u32,
    spec: ModelSpec,
    weights: BTreeMap<WeightMatrixId, DenseMatrix>,
    biases: BTreeMap<WeightMatrixId, Vec<f64>>,
}

impl ToyModel {
    pub fn to_json(&self) -> String {
        let ckpt = ModelCheckpoint {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            spec: self.spec().clone(),
            weights: self.weights().clone(),
            biases: self.biases().clone(),
        };
        serde_json::to_string_pretty(&ckpt).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let ckpt: ModelCheckpoint =
            serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ckpt.format != MODEL_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", ckpt.format)));
        }
        if ckpt.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {} (expected {MODEL_FORMAT_VERSION})",
                ckpt.version
            )));
        }
        ToyModel::from_parts(ckpt.spec, ckpt.weights, ckpt.biases)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let s = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_json(&s)
    }
}
