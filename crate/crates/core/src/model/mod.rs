//! Desk-scale trainable models: stacked activated linear layers, optional
//! single-head attention blocks, a linear head, exact reverse-mode gradients
//! and an Adam training loop.

mod checkpoint;
mod data;
mod network;
mod spec;
mod synth;
mod train;

pub use checkpoint::{MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use data::{Dataset, Split, Targets};
pub use network::{build_model, ForwardOutput, GradientSet, Gradients, ToyModel};
pub use spec::{Activation, ModelSpec, Objective};
pub use synth::{
    synth_dataset, InputDistribution, SynthKind, SynthTask, COLD_ENERGY, DELTA_RELATIVE_NORM,
    HOT_ENERGY,
};
pub(crate) use synth::gaussian;
pub(crate) use train::batches;
pub use train::{train, train_with_history, Adam, TrainParams};

use crate::id::WeightMatrixId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown weight matrix {0}")]
    UnknownMatrix(WeightMatrixId),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
