//! Dense linear algebra, statistics, and rank-correlation primitives.

mod matrix;
mod stats;

pub use matrix::DenseMatrix;
pub(crate) use matrix::dot;
pub use stats::{kendall_tau, mean_std, sort_desc_indices, MatrixOrdering};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: expected {expected:?}, found {found} elements")]
    ShapeMismatch { expected: (usize, usize), found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |a_ij - a_ji| = {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("orderings are over different matrix id sets")]
    MismatchedIdSets,
    #[error("at least {min} items required, got {got}")]
    TooFewItems { min: usize, got: usize },
}

/// Symmetry tolerance accepted by [`cholesky`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = m`.
///
/// Fails with [`NumericsError::NotPositiveDefinite`] at the first pivot that
/// is not strictly positive; callers respond by increasing damping.
pub fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(NumericsError::NotSquare { rows, cols });
    }
    let scale = m.data().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let max_asymmetry = m.max_asymmetry();
    if max_asymmetry > SYMMETRY_TOLERANCE * scale {
        return Err(NumericsError::NotSymmetric { max_asymmetry });
    }
    let n = rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.row(j)[..j];
        let pivot = m.get(j, j) - dot(lj, lj);
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let s = m.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reconstruction_error(m: &DenseMatrix, l: &DenseMatrix) -> f64 {
        let mut r = l.matmul_t(l);
        r.add_scaled(m, -1.0);
        r.frobenius_norm() / m.frobenius_norm()
    }

    #[test]
    fn identity_factor_is_identity() {
        let i3 = DenseMatrix::identity(3);
        assert_eq!(cholesky(&i3).unwrap(), i3);
    }

    #[test]
    fn two_by_two_by_hand() {
        let m = DenseMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&m).unwrap();
        // [[2,0],[1,√2]]: 2·2 = 4, 2·1 = 2, 1 + 2 = 3
        assert_eq!(l.get(0, 0), 2.0);
        assert_eq!(l.get(0, 1), 0.0);
        assert_eq!(l.get(1, 0), 1.0);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert!(reconstruction_error(&m, &l) < 1e-10);
    }

    #[test]
    fn indefinite_fails() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&m),
            Err(NumericsError::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            cholesky(&DenseMatrix::zeros(2, 3)),
            Err(NumericsError::NotSquare { .. })
        ));
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&m), Err(NumericsError::NotSymmetric { .. })));
    }

    proptest! {
        #[test]
        fn reconstructs_random_spd(n in 1usize..12, seed in prop::collection::vec(-1.0f64..1.0, 144)) {
            // G·Gᵀ + n·I is positive definite
            let g = DenseMatrix::from_fn(n, n, |i, j| seed[i * 12 + j]);
            let mut m = g.matmul_t(&g);
            m.add_scaled(&DenseMatrix::identity(n), n as f64 * 0.1);
            let l = cholesky(&m).unwrap();
            prop_assert!(reconstruction_error(&m, &l) < 1e-10);
            for i in 0..n {
                for j in (i + 1)..n {
                    prop_assert_eq!(l.get(i, j), 0.0);
                }
            }
        }
    }
}
