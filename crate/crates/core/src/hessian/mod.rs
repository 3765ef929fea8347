//! Per-matrix Hessian-diagonal estimators.
//!
//! Two routes: a central-difference oracle over exact gradients, and the
//! activation-autocorrelation surrogate `H ≈ (2/n)·XᵀX` built from the
//! inputs feeding each matrix, shared by every output row.

mod exact;
mod surrogate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use exact::exact_hessian_diag;
pub use surrogate::{activation_autocorrelation, surrogate_hessian_diag, Autocorrelation, MAX_DAMPING_ESCALATIONS};

use crate::id::WeightMatrixId;
use crate::model::{Dataset, ModelError, ToyModel};
use crate::numerics::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    ExactFd,
    ActivationSurrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Diagonal damping as a fraction of the mean autocorrelation diagonal.
    pub damping_fraction: f64,
    pub fd_epsilon: f64,
    /// Calibration rows accumulated per block.
    pub block_size: usize,
    pub estimator: Estimator,
    /// Largest matrix the finite-difference oracle accepts.
    pub max_exact_params: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            damping_fraction: 0.01,
            fd_epsilon: 1e-4,
            block_size: 128,
            estimator: Estimator::ActivationSurrogate,
            max_exact_params: 100_000,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.damping_fraction > 0.0) || !self.damping_fraction.is_finite() {
            return Err(ProbeError::InvalidConfig {
                field: "damping_fraction",
                reason: "must be > 0",
            });
        }
        if !(self.fd_epsilon > 0.0) || !self.fd_epsilon.is_finite() {
            return Err(ProbeError::InvalidConfig {
                field: "fd_epsilon",
                reason: "must be > 0",
            });
        }
        if self.block_size == 0 {
            return Err(ProbeError::InvalidConfig {
                field: "block_size",
                reason: "must be >= 1",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagonalStorage {
    /// One value per input dimension, identical for every output row.
    Compact {
        per_input_dim: Vec<f64>,
        row_multiplicity: usize,
    },
    /// Every entry, row-major `d1 × d2`.
    Full { values: Vec<f64> },
}

/// Hessian diagonal of one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianDiagonal {
    pub matrix_id: WeightMatrixId,
    pub d1: usize,
    pub d2: usize,
    pub storage: DiagonalStorage,
    pub estimator: Estimator,
    /// Damping added to each stored entry (0 for the oracle).
    pub damping: f64,
    /// Times damping was multiplied by 10 before Cholesky succeeded.
    pub damping_escalations: u32,
    /// Oracle entries whose sign was flipped during sanitization.
    pub sanitized_entries: usize,
}

impl HessianDiagonal {
    /// Compact diagonal with no damping.
    pub fn compact(matrix_id: WeightMatrixId, per_input_dim: Vec<f64>, d1: usize) -> Self {
        Self {
            matrix_id,
            d1,
            d2: per_input_dim.len(),
            storage: DiagonalStorage::Compact {
                per_input_dim,
                row_multiplicity: d1,
            },
            estimator: Estimator::ActivationSurrogate,
            damping: 0.0,
            damping_escalations: 0,
            sanitized_entries: 0,
        }
    }

    /// Full diagonal, row-major.
    pub fn full(matrix_id: WeightMatrixId, values: Vec<f64>, d1: usize, d2: usize) -> Self {
        assert_eq!(values.len(), d1 * d2, "full diagonal length");
        Self {
            matrix_id,
            d1,
            d2,
            storage: DiagonalStorage::Full { values },
            estimator: Estimator::ExactFd,
            damping: 0.0,
            damping_escalations: 0,
            sanitized_entries: 0,
        }
    }

    pub fn expanded_len(&self) -> usize {
        self.d1 * self.d2
    }

    /// Row-major `d1 × d2` diagonal.
    pub fn expanded(&self) -> Vec<f64> {
        match &self.storage {
            DiagonalStorage::Compact {
                per_input_dim,
                row_multiplicity,
            } => {
                let mut out = Vec::with_capacity(per_input_dim.len() * row_multiplicity);
                for _ in 0..*row_multiplicity {
                    out.extend_from_slice(per_input_dim);
                }
                out
            }
            DiagonalStorage::Full { values } => values.clone(),
        }
    }

    /// Expanded diagonal with the damping term removed.
    pub fn undamped_expanded(&self) -> Vec<f64> {
        self.expanded().into_iter().map(|v| v - self.damping).collect()
    }

    /// Sum of the expanded diagonal (the trace).
    pub fn trace(&self) -> f64 {
        match &self.storage {
            DiagonalStorage::Compact {
                per_input_dim,
                row_multiplicity,
            } => *row_multiplicity as f64 * per_input_dim.iter().sum::<f64>(),
            DiagonalStorage::Full { values } => values.iter().sum(),
        }
    }

    /// Copy with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        match &mut out.storage {
            DiagonalStorage::Compact { per_input_dim, .. } => {
                per_input_dim.iter_mut().for_each(|v| *v *= c)
            }
            DiagonalStorage::Full { values } => values.iter_mut().for_each(|v| *v *= c),
        }
        out.damping *= c;
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProbeError {
    #[error("invalid probe config: {field} {reason}")]
    InvalidConfig {
        field: &'static str,
        reason: &'static str,
    },
    #[error("{id} has {params} parameters, over the exact-oracle budget of {budget}")]
    TooLarge {
        id: WeightMatrixId,
        params: usize,
        budget: usize,
    },
    #[error("non-finite Hessian estimate for {0}")]
    NonFiniteResult(WeightMatrixId),
    #[error("autocorrelation of {id} is not positive definite after {escalations} damping escalations")]
    NotPositiveDefinite { id: WeightMatrixId, escalations: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Hessian diagonals for every weight matrix of `model`.
///
/// The surrogate needs one captured forward pass over `calib`; the oracle
/// estimator instead runs the finite-difference probe per matrix.
pub fn probe_all(
    model: &ToyModel,
    calib: &Dataset,
    cfg: &ProbeConfig,
) -> Result<BTreeMap<WeightMatrixId, HessianDiagonal>, ProbeError> {
    cfg.validate()?;
    match cfg.estimator {
        Estimator::ActivationSurrogate => {
            let dims = model.dims();
            activation_autocorrelation(model, calib, cfg)?
                .into_iter()
                .map(|(id, auto)| Ok((id, surrogate_hessian_diag(&auto, dims[&id].0)?)))
                .collect()
        }
        Estimator::ExactFd => {
            let dims = model.dims();
            // check the budget before spending any time
            for (id, (d1, d2)) in &dims {
                if d1 * d2 > cfg.max_exact_params {
                    return Err(ProbeError::TooLarge {
                        id: *id,
                        params: d1 * d2,
                        budget: cfg.max_exact_params,
                    });
                }
            }
            dims.keys()
                .map(|id| Ok((*id, exact_hessian_diag(model, calib, *id, cfg)?)))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::MatrixRole;

    #[test]
    fn compact_expands_by_row() {
        let id = WeightMatrixId::new(0, MatrixRole::Head);
        let d = HessianDiagonal::compact(id, vec![2.0, 5.0, 3.0], 2);
        assert_eq!(d.expanded(), vec![2.0, 5.0, 3.0, 2.0, 5.0, 3.0]);
        assert_eq!(d.trace(), 20.0);
        let i = HessianDiagonal::compact(id, vec![1.0; 3], 4);
        assert_eq!(i.expanded_len(), 12);
        assert_eq!(i.expanded(), vec![1.0; 12]);
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = ProbeConfig {
            damping_fraction: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(ProbeError::InvalidConfig {
                field: "damping_fraction",
                ..
            })
        ));
        let cfg = ProbeConfig {
            block_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
