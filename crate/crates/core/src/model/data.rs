use serde::{Deserialize, Serialize};

use super::{ModelError, ModelSpec, Objective};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calibration,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// Regression targets, `n × output_dim`.
    Values(DenseMatrix),
    /// Class indices.
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.rows(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Values(m) => Targets::Values(m.select_rows(indices)),
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Inputs (`n × seq_len·input_dim`) with matching targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: DenseMatrix,
    targets: Targets,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, targets: Targets, split: Split) -> Result<Self, ModelError> {
        if inputs.rows() == 0 {
            return Err(ModelError::EmptyDataset);
        }
        if targets.len() != inputs.rows() {
            return Err(ModelError::ShapeMismatch {
                what: "targets rows",
                expected: inputs.rows(),
                found: targets.len(),
            });
        }
        Ok(Self {
            inputs,
            targets,
            split,
        })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Rows at `indices`, in that order. Panics on an empty selection.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        assert!(!indices.is_empty(), "empty dataset selection");
        Dataset {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select(indices),
            split: self.split,
        }
    }

    /// First `count` samples.
    pub fn prefix(&self, count: usize) -> Dataset {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.select(&idx)
    }

    /// Disjoint first and second halves. Needs at least two samples.
    pub fn halves(&self) -> Result<(Dataset, Dataset), ModelError> {
        if self.len() < 2 {
            return Err(ModelError::EmptyDataset);
        }
        let mid = self.len() / 2;
        let first: Vec<usize> = (0..mid).collect();
        let second: Vec<usize> = (mid..self.len()).collect();
        Ok((self.select(&first), self.select(&second)))
    }

    pub fn scaled_inputs(&self, c: f64) -> Dataset {
        Dataset {
            inputs: self.inputs.scaled(c),
            targets: self.targets.clone(),
            split: self.split,
        }
    }

    /// Checks widths against a model spec.
    pub fn check_compatible(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        if self.inputs.cols() != spec.flat_input_dim() {
            return Err(ModelError::ShapeMismatch {
                what: "input width",
                expected: spec.flat_input_dim(),
                found: self.inputs.cols(),
            });
        }
        match (&self.targets, spec.task) {
            (Targets::Values(t), Objective::RegressionMse) => {
                if t.cols() != spec.output_dim {
                    return Err(ModelError::ShapeMismatch {
                        what: "target width",
                        expected: spec.output_dim,
                        found: t.cols(),
                    });
                }
            }
            (Targets::Labels(l), Objective::ClassificationCe) => {
                if let Some(&bad) = l.iter().find(|&&c| c >= spec.output_dim) {
                    return Err(ModelError::ShapeMismatch {
                        what: "class label",
                        expected: spec.output_dim,
                        found: bad,
                    });
                }
            }
            _ => {
                return Err(ModelError::InvalidSpec(
                    "target kind does not match the model objective".to_string(),
                ))
            }
        }
        Ok(())
    }
}
