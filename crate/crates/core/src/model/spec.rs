use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::id::{MatrixRole, WeightMatrixId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    pub(crate) fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Squared error summed over outputs, averaged over samples.
    RegressionMse,
    /// Softmax cross-entropy averaged over samples.
    ClassificationCe,
}

/// Architecture of a desk-scale model.
///
/// Wiring: `hidden_dims.len()` activated linear layers applied per token,
/// then `attention_blocks` residual single-head self-attention blocks, then
/// mean pooling over the `seq_len` tokens and a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub attention_blocks: usize,
    /// Tokens per sample; each input row holds `seq_len * input_dim` values.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub task: Objective,
    pub seed: u64,
}

fn default_seq_len() -> usize {
    1
}

impl ModelSpec {
    /// Width of the token representation entering attention and the head.
    pub fn model_width(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn flat_input_dim(&self) -> usize {
        self.seq_len * self.input_dim
    }

    pub fn head_layer(&self) -> usize {
        self.hidden_dims.len() + self.attention_blocks
    }

    /// `(d1, d2)` = (fan-out, fan-in) for every weight matrix, in id order.
    pub fn matrix_dims(&self) -> BTreeMap<WeightMatrixId, (usize, usize)> {
        let mut dims = BTreeMap::new();
        let mut width = self.input_dim;
        for (l, &h) in self.hidden_dims.iter().enumerate() {
            let role = if l == 0 {
                MatrixRole::FfnIn
            } else {
                MatrixRole::FfnOut
            };
            dims.insert(WeightMatrixId::new(l, role), (h, width));
            width = h;
        }
        for b in 0..self.attention_blocks {
            let layer = self.hidden_dims.len() + b;
            for role in [
                MatrixRole::AttnQ,
                MatrixRole::AttnK,
                MatrixRole::AttnV,
                MatrixRole::AttnO,
            ] {
                dims.insert(WeightMatrixId::new(layer, role), (width, width));
            }
        }
        dims.insert(
            WeightMatrixId::new(self.head_layer(), MatrixRole::Head),
            (self.output_dim, width),
        );
        dims
    }

    /// Ids of matrices that carry a bias vector (hidden layers and head).
    pub fn biased_ids(&self) -> Vec<WeightMatrixId> {
        self.matrix_dims()
            .into_keys()
            .filter(|id| matches!(id.role, MatrixRole::FfnIn | MatrixRole::FfnOut | MatrixRole::Head))
            .collect()
    }

    /// Dimension checks only; a single-matrix model passes.
    pub fn check_dims(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidSpec(msg.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1");
        }
        if self.output_dim == 0 {
            return bad("output_dim must be >= 1");
        }
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden_dims entries must be >= 1");
        }
        if self.task == Objective::ClassificationCe && self.output_dim < 2 {
            return bad("classification needs output_dim >= 2");
        }
        Ok(())
    }

    /// Full validation used by [`super::build_model`]: dimensions plus at
    /// least two weight matrices, since allocating over one is degenerate.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.check_dims()?;
        if self.matrix_dims().len() < 2 {
            return Err(ModelError::InvalidSpec(
                "model needs at least 2 weight matrices (add hidden_dims or attention_blocks)"
                    .to_string(),
            ));
        }
        Ok(())
    }
}
