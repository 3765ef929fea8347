//! Global and local sensitivity metrics and their fusion into allocation
//! weights θ.
//!
//! * global: the trace of the Hessian diagonal;
//! * local: the mean of the top-k diagonal entries, and the effective rank
//!   (fewest sorted entries holding a fraction α of the total mass);
//! * fusion: each metric is weighted by its dispersion `σ/μ²` across all
//!   matrices, first within the local pair (β₁, β₂), then between global
//!   and local (γ₁, γ₂).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hessian::HessianDiagonal;
use crate::id::WeightMatrixId;
use crate::numerics::{mean_std, MatrixOrdering, NumericsError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    /// Top-k size as a fraction of each matrix's own diagonal length.
    pub k_fraction: f64,
    /// Cumulative-mass threshold of the effective rank.
    pub alpha: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            k_fraction: 0.5,
            alpha: 0.85,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(MetricError::InvalidParams {
                field: "k_fraction",
                reason: "must be in (0, 1]",
            });
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(MetricError::InvalidParams {
                field: "alpha",
                reason: "must be in (0, 1]",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("invalid metric parameter: {field} {reason}")]
    InvalidParams {
        field: &'static str,
        reason: &'static str,
    },
    #[error("diagonal of {0} has zero total mass")]
    ZeroMass(WeightMatrixId),
    #[error("metric maps cover different matrix id sets")]
    MismatchedIdSets,
    #[error("no matrices to score")]
    EmptyInput,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn sorted_desc(diag: &HessianDiagonal) -> Vec<f64> {
    let mut v = diag.expanded();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Trace of the expanded diagonal.
pub fn global_sensitivity(diag: &HessianDiagonal) -> f64 {
    diag.trace()
}

/// `k = max(1, ⌊k_fraction · N⌋)` for a diagonal of length `N`.
pub fn topk_count(n: usize, k_fraction: f64) -> usize {
    ((k_fraction * n as f64).floor() as usize).clamp(1, n.max(1))
}

/// Mean of the `k` largest expanded diagonal entries.
pub fn topk_sensitivity(diag: &HessianDiagonal, params: &MetricParams) -> f64 {
    let sorted = sorted_desc(diag);
    let k = topk_count(sorted.len(), params.k_fraction);
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Smallest `k` whose top-`k` entries hold at least `alpha` of the mass.
pub fn effective_rank(diag: &HessianDiagonal, params: &MetricParams) -> Result<usize, MetricError> {
    let sorted = sorted_desc(diag);
    let mut cumulative = Vec::with_capacity(sorted.len());
    let mut acc = 0.0;
    for v in &sorted {
        acc += v;
        cumulative.push(acc);
    }
    let total = acc;
    if !(total > 0.0) {
        return Err(MetricError::ZeroMass(diag.matrix_id));
    }
    Ok(cumulative
        .iter()
        .position(|c| c / total >= params.alpha)
        .map_or(sorted.len(), |i| i + 1))
}

/// `σ/μ²` (population σ); 0 when the metric has no spread or no mass.
pub fn dispersion_weight(values: &[f64]) -> f64 {
    match mean_std(values) {
        Ok((mu, sigma)) if mu != 0.0 && sigma != 0.0 => sigma / (mu * mu),
        _ => 0.0,
    }
}

/// Equal-weight form `0.5/μ`, used when both dispersion weights vanish.
fn equal_weight(values: &[f64]) -> f64 {
    match mean_std(values) {
        Ok((mu, _)) if mu != 0.0 => 0.5 / mu,
        _ => 0.0,
    }
}

/// Two metrics fused with dispersion weights; returns `(fused, w1, w2, fallback)`.
fn fuse(
    first: &BTreeMap<WeightMatrixId, f64>,
    second: &BTreeMap<WeightMatrixId, f64>,
) -> Result<(BTreeMap<WeightMatrixId, f64>, f64, f64, bool), MetricError> {
    if first.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if !first.keys().eq(second.keys()) {
        return Err(MetricError::MismatchedIdSets);
    }
    let a: Vec<f64> = first.values().copied().collect();
    let b: Vec<f64> = second.values().copied().collect();
    let (mut w1, mut w2) = (dispersion_weight(&a), dispersion_weight(&b));
    let fallback = w1 == 0.0 && w2 == 0.0;
    if fallback {
        w1 = equal_weight(&a);
        w2 = equal_weight(&b);
    }
    let fused = first
        .iter()
        .map(|(id, x)| (*id, w1 * x + w2 * second[id]))
        .collect();
    Ok((fused, w1, w2, fallback))
}

/// `S_local = β₁·S_Topk + β₂·S_EffectiveRank`; returns `(S_local, β₁, β₂)`.
pub fn local_sensitivity(
    topk_all: &BTreeMap<WeightMatrixId, f64>,
    effrank_all: &BTreeMap<WeightMatrixId, usize>,
) -> Result<(BTreeMap<WeightMatrixId, f64>, f64, f64), MetricError> {
    let eff: BTreeMap<_, _> = effrank_all.iter().map(|(id, k)| (*id, *k as f64)).collect();
    let (local, b1, b2, _) = fuse(topk_all, &eff)?;
    Ok((local, b1, b2))
}

/// `θ = γ₁·S_global + γ₂·S_local`; returns `(θ, γ₁, γ₂)`.
pub fn combined_theta(
    global_all: &BTreeMap<WeightMatrixId, f64>,
    local_all: &BTreeMap<WeightMatrixId, f64>,
) -> Result<(BTreeMap<WeightMatrixId, f64>, f64, f64), MetricError> {
    let (theta, g1, g2, _) = fuse(global_all, local_all)?;
    Ok((theta, g1, g2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSensitivity {
    pub d1: usize,
    pub d2: usize,
    pub s_global: f64,
    pub s_topk: f64,
    pub s_effrank: usize,
    /// The diagonal had no mass; `s_effrank` was set to 1 by convention.
    pub effrank_zero_mass: bool,
    pub s_local: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub params: MetricParams,
    pub matrices: BTreeMap<WeightMatrixId, MatrixSensitivity>,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// The equal-weight fallback replaced (β₁, β₂).
    pub local_fallback: bool,
    /// The equal-weight fallback replaced (γ₁, γ₂).
    pub theta_fallback: bool,
}

impl SensitivityReport {
    pub fn theta(&self) -> BTreeMap<WeightMatrixId, f64> {
        self.matrices.iter().map(|(id, m)| (*id, m.theta)).collect()
    }

    pub fn dims(&self) -> BTreeMap<WeightMatrixId, (usize, usize)> {
        self.matrices.iter().map(|(id, m)| (*id, (m.d1, m.d2))).collect()
    }

    /// Matrices by θ, most sensitive first.
    pub fn ordering(&self) -> MatrixOrdering {
        MatrixOrdering::from_scores(&self.theta()).expect("report is non-empty")
    }
}

/// Every metric and the fused θ for a set of probed matrices.
pub fn sensitivity_report(
    diags: &BTreeMap<WeightMatrixId, HessianDiagonal>,
    params: &MetricParams,
) -> Result<SensitivityReport, MetricError> {
    params.validate()?;
    if diags.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut global = BTreeMap::new();
    let mut topk = BTreeMap::new();
    let mut effrank = BTreeMap::new();
    let mut zero_mass = BTreeMap::new();
    for (id, d) in diags {
        global.insert(*id, global_sensitivity(d));
        topk.insert(*id, topk_sensitivity(d, params));
        let (k, zero) = match effective_rank(d, params) {
            Ok(k) => (k, false),
            Err(MetricError::ZeroMass(_)) => (1, true),
            Err(e) => return Err(e),
        };
        effrank.insert(*id, k);
        zero_mass.insert(*id, zero);
    }
    let eff_f: BTreeMap<_, _> = effrank.iter().map(|(id, k)| (*id, *k as f64)).collect();
    let (local, beta1, beta2, local_fallback) = fuse(&topk, &eff_f)?;
    let (theta, gamma1, gamma2, theta_fallback) = fuse(&global, &local)?;
    let matrices = diags
        .iter()
        .map(|(id, d)| {
            (
                *id,
                MatrixSensitivity {
                    d1: d.d1,
                    d2: d.d2,
                    s_global: global[id],
                    s_topk: topk[id],
                    s_effrank: effrank[id],
                    effrank_zero_mass: zero_mass[id],
                    s_local: local[id],
                    theta: theta[id],
                },
            )
        })
        .collect();
    Ok(SensitivityReport {
        params: *params,
        matrices,
        beta1,
        beta2,
        gamma1,
        gamma2,
        local_fallback,
        theta_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::MatrixRole;
    use proptest::prelude::*;

    fn id(l: usize) -> WeightMatrixId {
        WeightMatrixId::new(l, MatrixRole::FfnOut)
    }

    fn full(values: &[f64]) -> HessianDiagonal {
        HessianDiagonal::full(id(0), values.to_vec(), 1, values.len())
    }

    fn params(k_fraction: f64, alpha: f64) -> MetricParams {
        MetricParams { k_fraction, alpha }
    }

    #[test]
    fn global_examples() {
        assert_eq!(global_sensitivity(&full(&[1.0, 2.0, 3.0])), 6.0);
        assert_eq!(global_sensitivity(&HessianDiagonal::compact(id(0), vec![2.0, 5.0, 3.0], 2)), 20.0);
        assert_eq!(global_sensitivity(&full(&[0.0; 4])), 0.0);
    }

    #[test]
    fn topk_examples() {
        let d = full(&[5.0, 1.0, 3.0, 2.0]);
        assert_eq!(topk_sensitivity(&d, &params(0.5, 0.85)), 4.0);
        assert_eq!(topk_sensitivity(&d, &params(1.0, 0.85)), 11.0 / 4.0);
        assert_eq!(topk_sensitivity(&full(&[0.5, 9.0, 2.0]), &params(0.1, 0.85)), 9.0);
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&full(&[4.0, 3.0, 2.0, 1.0]), &params(0.5, 0.85)).unwrap(), 3);
        assert_eq!(effective_rank(&full(&[0.1, 7.0, 3.0, 1e-9]), &params(0.5, 1.0)).unwrap(), 4);
        assert_eq!(effective_rank(&full(&[1.0; 4]), &params(0.5, 0.5)).unwrap(), 2);
        assert!(matches!(
            effective_rank(&full(&[0.0; 3]), &params(0.5, 0.85)),
            Err(MetricError::ZeroMass(_))
        ));
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion_weight(&[1.0, 3.0]), 0.25);
        assert_eq!(dispersion_weight(&[5.0, 5.0, 5.0]), 0.0);
        assert_eq!(dispersion_weight(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn local_with_flat_effrank_follows_topk() {
        let topk = [(id(0), 4.0), (id(1), 2.0)].into_iter().collect();
        let eff = [(id(0), 2), (id(1), 2)].into_iter().collect();
        let (local, b1, b2) = local_sensitivity(&topk, &eff).unwrap();
        // μ = 3, σ = 1
        assert!((b1 - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(b2, 0.0);
        assert!(local[&id(0)] > local[&id(1)]);
    }

    #[test]
    fn identical_metrics_use_fallback() {
        let topk = [(id(0), 3.0), (id(1), 3.0)].into_iter().collect();
        let eff = [(id(0), 5), (id(1), 5)].into_iter().collect();
        let (local, b1, b2) = local_sensitivity(&topk, &eff).unwrap();
        assert_eq!((b1, b2), (0.5 / 3.0, 0.1));
        assert_eq!(local[&id(0)], local[&id(1)]);
    }

    #[test]
    fn theta_with_flat_local_follows_global() {
        let global = [(id(0), 10.0), (id(1), 30.0)].into_iter().collect();
        let local = [(id(0), 1.0), (id(1), 1.0)].into_iter().collect();
        let (theta, g1, g2) = combined_theta(&global, &local).unwrap();
        assert_eq!(g2, 0.0);
        assert!((g1 - 10.0 / 400.0).abs() < 1e-15);
        assert!(theta[&id(1)] > theta[&id(0)]);

        let eq: BTreeMap<_, _> = [(id(0), 2.0), (id(1), 2.0)].into_iter().collect();
        let (theta, _, _) = combined_theta(&eq, &eq).unwrap();
        assert_eq!(theta[&id(0)], theta[&id(1)]);
    }

    #[test]
    fn mismatched_ids_are_rejected() {
        let a = [(id(0), 1.0)].into_iter().collect();
        let b = [(id(1), 1.0)].into_iter().collect();
        assert_eq!(combined_theta(&a, &b), Err(MetricError::MismatchedIdSets));
    }

    fn diag_strategy() -> impl Strategy<Value = Vec<HessianDiagonal>> {
        prop::collection::vec((1usize..6, prop::collection::vec(1e-3f64..10.0, 1..8)), 2..7).prop_map(|ms| {
            ms.into_iter()
                .enumerate()
                .map(|(l, (d1, per))| HessianDiagonal::compact(id(l), per, d1))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn theta_ordering_is_scale_invariant(diags in diag_strategy(), c in prop::sample::select(vec![1e-3, 0.5, 7.0, 1e3])) {
            let p = MetricParams::default();
            let base: BTreeMap<_, _> = diags.iter().map(|d| (d.matrix_id, d.clone())).collect();
            let scaled: BTreeMap<_, _> = diags.iter().map(|d| (d.matrix_id, d.scaled(c))).collect();
            let a = sensitivity_report(&base, &p).unwrap();
            let b = sensitivity_report(&scaled, &p).unwrap();
            for (id, m) in &a.matrices {
                let n = &b.matrices[id];
                prop_assert_eq!(m.s_effrank, n.s_effrank);
                prop_assert!((n.s_global - c * m.s_global).abs() <= 1e-9 * n.s_global.abs());
                prop_assert!((n.s_topk - c * m.s_topk).abs() <= 1e-9 * n.s_topk.abs());
                prop_assert!((n.theta - m.theta).abs() <= 1e-9 * m.theta.abs().max(1e-300));
            }
            let thetas: Vec<f64> = a.matrices.values().map(|m| m.theta).collect();
            prop_assert!(thetas.iter().all(|t| *t >= 0.0 && t.is_finite()));
            prop_assert!(thetas.iter().any(|t| *t > 0.0));
        }

        #[test]
        fn topk_non_increasing_in_k(values in prop::collection::vec(0.0f64..5.0, 1..30)) {
            let d = full(&values);
            let n = values.len();
            let mut prev = f64::INFINITY;
            for k in 1..=n {
                let t = topk_sensitivity(&d, &params(k as f64 / n as f64, 0.85));
                prop_assert!(t <= prev + 1e-12);
                prev = t;
            }
            let top1 = topk_sensitivity(&d, &params(1.0 / n as f64, 0.85));
            let all = topk_sensitivity(&d, &params(1.0, 0.85));
            let uniform = values.iter().all(|v| *v == values[0]);
            prop_assert!(all <= top1);
            prop_assert_eq!(uniform, (all - top1).abs() <= 1e-12 * top1.max(1.0));
        }

        #[test]
        fn effrank_non_decreasing_in_alpha(values in prop::collection::vec(1e-3f64..5.0, 1..30)) {
            let d = full(&values);
            let mut prev = 0;
            for a in [0.1, 0.3, 0.5, 0.7, 0.85, 0.95, 1.0] {
                let k = effective_rank(&d, &params(0.5, a)).unwrap();
                prop_assert!(k >= prev);
                prev = k;
            }
            prop_assert_eq!(prev, values.len());
        }
    }
}
