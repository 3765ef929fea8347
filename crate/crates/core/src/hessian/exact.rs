use rayon::prelude::*;

use super::{HessianDiagonal, ProbeConfig, ProbeError};
use crate::id::WeightMatrixId;
use crate::model::{Dataset, ToyModel};

/// Finite-difference Hessian diagonal of the batch-mean loss for one matrix:
/// `h_i = (g_i(w + εe_i) − g_i(w − εe_i)) / 2ε`.
///
/// Costs two full gradient evaluations per parameter. Negative entries are
/// replaced by their magnitude; the count is kept in `sanitized_entries`.
pub fn exact_hessian_diag(
    model: &ToyModel,
    data: &Dataset,
    id: WeightMatrixId,
    cfg: &ProbeConfig,
) -> Result<HessianDiagonal, ProbeError> {
    cfg.validate()?;
    data.check_compatible(model.spec())?;
    let (d1, d2) = model.weight(id)?.shape();
    let params = d1 * d2;
    if params > cfg.max_exact_params {
        return Err(ProbeError::TooLarge {
            id,
            params,
            budget: cfg.max_exact_params,
        });
    }
    let eps = cfg.fd_epsilon;
    let raw: Vec<f64> = (0..params)
        .into_par_iter()
        .map(|p| {
            let partial = |delta: f64| -> Result<f64, ProbeError> {
                let mut m = model.clone();
                let mut w = m.weight(id)?.clone();
                w.data_mut()[p] += delta;
                m.set_weight(id, w)?;
                Ok(m.grad(data)?[&id].data()[p])
            };
            Ok((partial(eps)? - partial(-eps)?) / (2.0 * eps))
        })
        .collect::<Result<_, ProbeError>>()?;

    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFiniteResult(id));
    }
    let sanitized = raw.iter().filter(|v| **v < 0.0).count();
    let values = raw.into_iter().map(f64::abs).collect();
    let mut diag = HessianDiagonal::full(id, values, d1, d2);
    diag.sanitized_entries = sanitized;
    Ok(diag)
}
