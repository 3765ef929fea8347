use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Estimator, HessianDiagonal, ProbeConfig, ProbeError};
use crate::id::WeightMatrixId;
use crate::model::{Dataset, ToyModel};
use crate::numerics::{cholesky, DenseMatrix, NumericsError};

/// Extra attempts, each with 10× damping, before giving up on Cholesky.
pub const MAX_DAMPING_ESCALATIONS: u32 = 3;

/// Input autocorrelation `(2/n)·XᵀX` of one weight matrix, kept undamped
/// next to the damping that will be added to its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autocorrelation {
    pub matrix_id: WeightMatrixId,
    pub raw: DenseMatrix,
    pub damping: f64,
    /// Rows of `X` accumulated.
    pub samples: usize,
}

impl Autocorrelation {
    /// `raw + damping·I`
    pub fn damped(&self) -> DenseMatrix {
        self.damped_by(self.damping)
    }

    fn damped_by(&self, damping: f64) -> DenseMatrix {
        let mut m = self.raw.clone();
        for i in 0..m.rows() {
            m.set(i, i, m.get(i, i) + damping);
        }
        m
    }
}

/// `(2/n)·XᵀX`, accumulated `block_size` rows at a time.
fn blocked_gram(x: &DenseMatrix, block_size: usize) -> DenseMatrix {
    let n = x.rows();
    let mut acc = DenseMatrix::zeros(x.cols(), x.cols());
    let mut start = 0;
    while start < n {
        let end = (start + block_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let block = x.select_rows(&idx);
        acc.add_scaled(&block.t_matmul(&block), 1.0);
        start = end;
    }
    acc.scaled(2.0 / n as f64)
}

/// Damped input autocorrelation for every weight matrix, from one captured
/// forward pass over `calib`.
///
/// Damping is `damping_fraction × mean(diag)`; an all-zero diagonal falls
/// back to `damping_fraction` itself so the result stays positive definite.
pub fn activation_autocorrelation(
    model: &ToyModel,
    calib: &Dataset,
    cfg: &ProbeConfig,
) -> Result<BTreeMap<WeightMatrixId, Autocorrelation>, ProbeError> {
    cfg.validate()?;
    let acts = model
        .forward(calib, true)?
        .activations
        .expect("capture requested");
    let mut out = BTreeMap::new();
    for (id, x) in acts {
        let raw = blocked_gram(&x, cfg.block_size);
        let diag = raw.diag();
        let mean = diag.iter().sum::<f64>() / diag.len() as f64;
        let damping = if mean > 0.0 {
            cfg.damping_fraction * mean
        } else {
            cfg.damping_fraction
        };
        out.insert(
            id,
            Autocorrelation {
                matrix_id: id,
                raw,
                damping,
                samples: x.rows(),
            },
        );
    }
    Ok(out)
}

/// Compact Hessian diagonal from an autocorrelation, shared by all `d1`
/// output rows.
///
/// Confirms positive-definiteness with a Cholesky factorisation, multiplying
/// the damping by 10 up to [`MAX_DAMPING_ESCALATIONS`] times on failure.
pub fn surrogate_hessian_diag(auto: &Autocorrelation, d1: usize) -> Result<HessianDiagonal, ProbeError> {
    let id = auto.matrix_id;
    let mut damping = auto.damping;
    let mut escalations = 0;
    let damped = loop {
        let m = auto.damped_by(damping);
        match cholesky(&m) {
            Ok(_) => break m,
            Err(NumericsError::NotPositiveDefinite { .. }) if escalations < MAX_DAMPING_ESCALATIONS => {
                damping *= 10.0;
                escalations += 1;
            }
            Err(NumericsError::NotPositiveDefinite { .. }) => {
                return Err(ProbeError::NotPositiveDefinite { id, escalations })
            }
            Err(e) => return Err(e.into()),
        }
    };
    let per_input_dim = damped.diag();
    if per_input_dim.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFiniteResult(id));
    }
    let mut diag = HessianDiagonal::compact(id, per_input_dim, d1);
    diag.estimator = Estimator::ActivationSurrogate;
    diag.damping = damping;
    diag.damping_escalations = escalations;
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::MatrixRole;
    use crate::model::{Objective, Split, Targets};

    fn head() -> WeightMatrixId {
        WeightMatrixId::new(0, MatrixRole::Head)
    }

    fn linear_with_inputs(x: DenseMatrix) -> (ToyModel, Dataset) {
        let n = x.rows();
        let d = x.cols();
        let m = ToyModel::linear(DenseMatrix::identity(d), Objective::RegressionMse).unwrap();
        let data = Dataset::new(x, Targets::Values(DenseMatrix::zeros(n, d)), Split::Calibration).unwrap();
        (m, data)
    }

    #[test]
    fn one_hot_rows_give_scaled_identity() {
        let d2 = 4;
        let (m, data) = linear_with_inputs(DenseMatrix::identity(d2));
        let cfg = ProbeConfig::default();
        let auto = activation_autocorrelation(&m, &data, &cfg).unwrap().remove(&head()).unwrap();
        let scale = 2.0 / d2 as f64;
        assert_eq!(auto.raw, DenseMatrix::identity(d2).scaled(scale));
        assert!((auto.damping - 0.01 * scale).abs() < 1e-15);
        let damped = auto.damped();
        for i in 0..d2 {
            assert!((damped.get(i, i) - scale * 1.01).abs() < 1e-15);
        }
    }

    #[test]
    fn blocking_does_not_change_the_sum() {
        let x = DenseMatrix::from_fn(37, 5, |i, j| ((i * 7 + j * 3) as f64).cos());
        let (m, data) = linear_with_inputs(x);
        let one = ProbeConfig {
            block_size: 1000,
            ..Default::default()
        };
        let many = ProbeConfig {
            block_size: 4,
            ..Default::default()
        };
        let a = &activation_autocorrelation(&m, &data, &one).unwrap()[&head()];
        let b = &activation_autocorrelation(&m, &data, &many).unwrap()[&head()];
        for (u, v) in a.raw.data().iter().zip(b.raw.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_activations_are_rescued_by_damping() {
        let (m, data) = linear_with_inputs(DenseMatrix::zeros(6, 3));
        let cfg = ProbeConfig::default();
        let auto = &activation_autocorrelation(&m, &data, &cfg).unwrap()[&head()];
        assert_eq!(auto.damped(), DenseMatrix::identity(3).scaled(0.01));
        let h = surrogate_hessian_diag(auto, 2).unwrap();
        assert!(h.expanded().iter().all(|v| *v > 0.0));
        assert_eq!(h.damping_escalations, 0);
    }

    #[test]
    fn identity_and_replication() {
        let auto = Autocorrelation {
            matrix_id: head(),
            raw: DenseMatrix::identity(3),
            damping: 0.0,
            samples: 3,
        };
        let h = surrogate_hessian_diag(&auto, 4).unwrap();
        assert_eq!(h.expanded(), vec![1.0; 12]);
        let auto = Autocorrelation {
            raw: DenseMatrix::diagonal_from(&[2.0, 5.0, 3.0]),
            ..auto
        };
        let h = surrogate_hessian_diag(&auto, 2).unwrap();
        assert_eq!(h.expanded(), vec![2.0, 5.0, 3.0, 2.0, 5.0, 3.0]);
    }

    #[test]
    fn near_singular_escalates_damping() {
        // eigenvalues 2.02 and -0.02: needs damping > 0.02
        let raw = DenseMatrix::from_rows(&[vec![1.0, 1.02], vec![1.02, 1.0]]).unwrap();
        let auto = Autocorrelation {
            matrix_id: head(),
            raw,
            damping: 0.001,
            samples: 2,
        };
        let h = surrogate_hessian_diag(&auto, 1).unwrap();
        assert_eq!(h.damping_escalations, 2);
        assert!((h.damping - 0.1).abs() < 1e-12);

        let hopeless = Autocorrelation {
            raw: DenseMatrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap(),
            ..auto
        };
        assert!(matches!(
            surrogate_hessian_diag(&hopeless, 1),
            Err(ProbeError::NotPositiveDefinite { escalations: 3, .. })
        ));
    }
}
