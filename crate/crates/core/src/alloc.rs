//! Integer LoRA rank allocation under a fixed total budget.
//!
//! `r_total = avg_rank × |matrices|` is shared out three ways:
//! proportionally to θ with largest-remainder rounding (SRA), by
//! sensitivity-ordered categories with symmetric offsets around the average
//! (PRA), or evenly (uniform). Every rank lies in `[min_rank, min(d1, d2)]`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::id::WeightMatrixId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sra,
    Pra,
    Uniform,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sra => "sra",
            Strategy::Pra => "pra",
            Strategy::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    pub avg_rank: usize,
    /// Floor for every matrix; 0 lets a matrix drop out of adaptation.
    pub min_rank: usize,
    pub strategy: Strategy,
    pub pra_categories: usize,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            avg_rank: 4,
            min_rank: 1,
            strategy: Strategy::Sra,
            pra_categories: 3,
        }
    }
}

impl AllocationConfig {
    pub fn with_strategy(self, strategy: Strategy) -> Self {
        Self { strategy, ..self }
    }

    pub fn validate(&self) -> Result<(), AllocError> {
        if self.avg_rank < self.min_rank {
            return Err(AllocError::InvalidConfig {
                field: "avg_rank",
                reason: "must be >= min_rank",
            });
        }
        if self.avg_rank == 0 {
            return Err(AllocError::InvalidConfig {
                field: "avg_rank",
                reason: "must be >= 1",
            });
        }
        if self.pra_categories == 0 {
            return Err(AllocError::InvalidConfig {
                field: "pra_categories",
                reason: "must be >= 1",
            });
        }
        Ok(())
    }

    pub fn r_total(&self, matrices: usize) -> usize {
        self.avg_rank * matrices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampEvent {
    pub matrix_id: WeightMatrixId,
    /// Unclamped proportional share.
    pub requested: f64,
    pub granted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAllocation {
    pub ranks: BTreeMap<WeightMatrixId, usize>,
    pub r_total: usize,
    pub strategy_used: Strategy,
    pub clamp_events: Vec<ClampEvent>,
    /// `θ/Σθ · r_total` before clamping and rounding (`avg_rank` for uniform).
    pub raw_shares: BTreeMap<WeightMatrixId, f64>,
}

impl RankAllocation {
    pub fn is_clamped(&self, id: &WeightMatrixId) -> bool {
        self.clamp_events.iter().any(|e| e.matrix_id == *id)
    }

    pub fn rank(&self, id: &WeightMatrixId) -> usize {
        self.ranks.get(id).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AllocError {
    #[error("budget {r_total} cannot satisfy rank bounds (needs {min_total}..={max_total})")]
    InfeasibleBudget {
        r_total: usize,
        min_total: usize,
        max_total: usize,
    },
    #[error("allocation weights sum to zero")]
    ZeroThetaMass,
    #[error("allocation weight of {0} is negative or not finite")]
    InvalidTheta(WeightMatrixId),
    #[error("theta and dims cover different matrix id sets")]
    MismatchedIdSets,
    #[error("no matrices to allocate")]
    Empty,
    #[error("invalid allocation config: {field} {reason}")]
    InvalidConfig {
        field: &'static str,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    BudgetViolation { sum: usize, r_total: usize },
    /// `r_total` differs from `avg_rank × |matrices|`.
    TotalMismatch { r_total: usize, expected: usize },
    BoundViolation {
        matrix_id: WeightMatrixId,
        rank: usize,
        min: usize,
        max: usize,
    },
    MissingId { matrix_id: WeightMatrixId },
    UnknownId { matrix_id: WeightMatrixId },
}

fn cap(d: (usize, usize)) -> usize {
    d.0.min(d.1)
}

/// Bounds and budget shared by every strategy.
fn feasible(dims: &BTreeMap<WeightMatrixId, (usize, usize)>, cfg: &AllocationConfig) -> Result<usize, AllocError> {
    cfg.validate()?;
    if dims.is_empty() {
        return Err(AllocError::Empty);
    }
    let r_total = cfg.r_total(dims.len());
    let min_total = cfg.min_rank * dims.len();
    let max_total: usize = dims.values().map(|d| cap(*d)).sum();
    let any_below_floor = dims.values().any(|d| cap(*d) < cfg.min_rank);
    if any_below_floor || r_total < min_total || r_total > max_total {
        return Err(AllocError::InfeasibleBudget {
            r_total,
            min_total,
            max_total,
        });
    }
    Ok(r_total)
}

fn check_theta(
    theta: &BTreeMap<WeightMatrixId, f64>,
    dims: &BTreeMap<WeightMatrixId, (usize, usize)>,
) -> Result<f64, AllocError> {
    if !theta.keys().eq(dims.keys()) {
        return Err(AllocError::MismatchedIdSets);
    }
    if let Some((id, _)) = theta.iter().find(|(_, t)| !(t.is_finite() && **t >= 0.0)) {
        return Err(AllocError::InvalidTheta(*id));
    }
    let sum: f64 = theta.values().sum();
    if !(sum > 0.0) {
        return Err(AllocError::ZeroThetaMass);
    }
    Ok(sum)
}

/// Real shares `clamp(λ·p_i, lo, hi_i)` summing to `budget`, with `λ` found
/// exactly on the piecewise-linear total. Ids with `p_i = 0` sit at `lo`
/// unless the others are all saturated, in which case they split the rest.
fn clamped_shares(p: &[f64], lo: f64, hi: &[f64], budget: f64) -> Vec<f64> {
    let n = p.len();
    let total = |lambda: f64| -> f64 {
        (0..n).map(|i| (lambda * p[i]).clamp(lo, hi[i])).sum()
    };
    let positive: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
    let saturated: f64 = (0..n).map(|i| if p[i] > 0.0 { hi[i] } else { lo }).sum();
    if budget >= saturated {
        let zeros: Vec<usize> = (0..n).filter(|&i| p[i] == 0.0).collect();
        let mut out: Vec<f64> = (0..n).map(|i| if p[i] > 0.0 { hi[i] } else { lo }).collect();
        if !zeros.is_empty() && budget > saturated {
            let sub_hi: Vec<f64> = zeros.iter().map(|&i| hi[i]).collect();
            let sub_budget = budget - (saturated - lo * zeros.len() as f64);
            let sub = clamped_shares(&vec![1.0; zeros.len()], lo, &sub_hi, sub_budget);
            for (k, &i) in zeros.iter().enumerate() {
                out[i] = sub[k];
            }
        }
        return out;
    }
    // breakpoints where some λ·p_i hits a bound
    let mut breaks: Vec<f64> = positive
        .iter()
        .flat_map(|&i| [lo / p[i], hi[i] / p[i]])
        .collect();
    breaks.push(0.0);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let idx = breaks.partition_point(|b| total(*b) < budget);
    if idx == breaks.len() {
        return (0..n).map(|i| if p[i] > 0.0 { hi[i] } else { lo }).collect();
    }
    let lambda = if idx == 0 {
        breaks[0]
    } else {
        // total is linear on the segment; classify ids at its midpoint
        let (a, b) = (breaks[idx - 1], breaks[idx]);
        let mid = 0.5 * (a + b);
        let free = |i: usize| p[i] > 0.0 && mid * p[i] > lo && mid * p[i] < hi[i];
        let fixed: f64 = (0..n).filter(|&i| !free(i)).map(|i| (mid * p[i]).clamp(lo, hi[i])).sum();
        let slope: f64 = (0..n).filter(|&i| free(i)).map(|i| p[i]).sum();
        if slope > 0.0 {
            ((budget - fixed) / slope).clamp(a, b)
        } else {
            b
        }
    };
    (0..n).map(|i| (lambda * p[i]).clamp(lo, hi[i])).collect()
}

const SHARE_QUANTUM: f64 = 1e9;

/// Largest-remainder rounding of real shares summing to `budget`.
///
/// Shares are quantized to 1e-9 first, so float noise cannot split an exact
/// tie; remaining ties go to the smaller id.
fn largest_remainder(ids: &[WeightMatrixId], shares: &[f64], hi: &[usize], budget: usize) -> Vec<usize> {
    let q = SHARE_QUANTUM as u128;
    let quanta: Vec<u128> = shares.iter().map(|s| (s * SHARE_QUANTUM).round().max(0.0) as u128).collect();
    let mut ranks: Vec<usize> = quanta.iter().map(|x| (x / q) as usize).collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| (quanta[b] % q).cmp(&(quanta[a] % q)).then(ids[a].cmp(&ids[b])));
    let assigned: usize = ranks.iter().sum();
    if assigned < budget {
        let mut left = budget - assigned;
        for &i in order.iter().cycle().take(ids.len() * (left + 1)) {
            if left == 0 {
                break;
            }
            if ranks[i] < hi[i] {
                ranks[i] += 1;
                left -= 1;
            }
        }
    } else if assigned > budget {
        // only reachable through quantization at the 1e-9 level
        let mut extra = assigned - budget;
        for &i in order.iter().rev().cycle().take(ids.len() * (extra + 1)) {
            if extra == 0 {
                break;
            }
            if ranks[i] > 0 {
                ranks[i] -= 1;
                extra -= 1;
            }
        }
    }
    ranks
}

/// Proportional allocation `r^w = θ^w/Σθ · r_total`, clamped into the rank
/// bounds and rounded by largest remainder.
pub fn allocate_sra(
    theta: &BTreeMap<WeightMatrixId, f64>,
    dims: &BTreeMap<WeightMatrixId, (usize, usize)>,
    cfg: &AllocationConfig,
) -> Result<RankAllocation, AllocError> {
    check_theta(theta, dims)?;
    let r_total = feasible(dims, cfg)?;
    apportion(theta, dims, r_total, cfg.min_rank)
}

/// SRA for an explicit budget rather than `avg_rank × |matrices|`.
pub fn apportion(
    theta: &BTreeMap<WeightMatrixId, f64>,
    dims: &BTreeMap<WeightMatrixId, (usize, usize)>,
    r_total: usize,
    min_rank: usize,
) -> Result<RankAllocation, AllocError> {
    let sum = check_theta(theta, dims)?;
    let ids: Vec<WeightMatrixId> = theta.keys().copied().collect();
    let hi: Vec<usize> = ids.iter().map(|id| cap(dims[id])).collect();
    let min_total = min_rank * ids.len();
    let max_total: usize = hi.iter().sum();
    if hi.iter().any(|h| *h < min_rank) || r_total < min_total || r_total > max_total {
        return Err(AllocError::InfeasibleBudget {
            r_total,
            min_total,
            max_total,
        });
    }
    let p: Vec<f64> = theta.values().map(|t| t / sum).collect();
    let hi_f: Vec<f64> = hi.iter().map(|h| *h as f64).collect();
    let lo = min_rank as f64;

    let shares = clamped_shares(&p, lo, &hi_f, r_total as f64);
    let ranks = largest_remainder(&ids, &shares, &hi, r_total);

    let raw_shares: BTreeMap<_, _> = ids.iter().zip(&p).map(|(id, pi)| (*id, pi * r_total as f64)).collect();
    let clamp_events = ids
        .iter()
        .enumerate()
        .filter(|&(i, id)| {
            let at_bound = shares[i] == lo || shares[i] == hi_f[i];
            at_bound && (shares[i] - raw_shares[id]).abs() > 1.0 / SHARE_QUANTUM
        })
        .map(|(i, id)| ClampEvent {
            matrix_id: *id,
            requested: raw_shares[id],
            granted: ranks[i],
        })
        .collect();
    Ok(RankAllocation {
        ranks: ids.into_iter().zip(ranks).collect(),
        r_total,
        strategy_used: Strategy::Sra,
        clamp_events,
        raw_shares,
    })
}

/// Category allocation: ids sorted by θ (descending, ties by id) are cut
/// into `pra_categories` contiguous groups, earlier groups taking the extra
/// element; group `g` starts at `avg_rank + ⌊C/2⌋ − g`. The sum is then
/// fixed by ±1 sweeps from the least-sensitive end.
pub fn allocate_pra(
    theta: &BTreeMap<WeightMatrixId, f64>,
    dims: &BTreeMap<WeightMatrixId, (usize, usize)>,
    cfg: &AllocationConfig,
) -> Result<RankAllocation, AllocError> {
    let sum = check_theta(theta, dims)?;
    let r_total = feasible(dims, cfg)?;
    let n = theta.len();
    let c = cfg.pra_categories;
    if c > n {
        return Err(AllocError::InvalidConfig {
            field: "pra_categories",
            reason: "must not exceed the number of matrices",
        });
    }
    let mut order: Vec<WeightMatrixId> = theta.keys().copied().collect();
    order.sort_by(|a, b| theta[b].total_cmp(&theta[a]).then(a.cmp(b)));

    let (base, extra) = (n / c, n % c);
    let lo = cfg.min_rank as i64;
    let mut ranks: Vec<i64> = Vec::with_capacity(n);
    let mut requested: Vec<i64> = Vec::with_capacity(n);
    for g in 0..c {
        let size = base + usize::from(g < extra);
        let r = cfg.avg_rank as i64 + (c / 2) as i64 - g as i64;
        for _ in 0..size {
            let id = order[ranks.len()];
            requested.push(r);
            ranks.push(r.clamp(lo, cap(dims[&id]) as i64));
        }
    }

    let target = r_total as i64;
    loop {
        let diff = target - ranks.iter().sum::<i64>();
        if diff == 0 {
            break;
        }
        let step = diff.signum();
        let mut moved = false;
        let mut remaining = diff.abs();
        for i in (0..n).rev() {
            if remaining == 0 {
                break;
            }
            let next = ranks[i] + step;
            if next >= lo && next <= cap(dims[&order[i]]) as i64 {
                ranks[i] = next;
                remaining -= 1;
                moved = true;
            }
        }
        if !moved {
            let max_total = dims.values().map(|d| cap(*d)).sum();
            return Err(AllocError::InfeasibleBudget {
                r_total,
                min_total: cfg.min_rank * n,
                max_total,
            });
        }
    }

    let clamp_events = (0..n)
        .filter(|&i| {
            let r = requested[i];
            r < lo || r > cap(dims[&order[i]]) as i64
        })
        .map(|i| ClampEvent {
            matrix_id: order[i],
            requested: requested[i] as f64,
            granted: ranks[i] as usize,
        })
        .collect();
    let raw_shares = theta.iter().map(|(id, t)| (*id, t / sum * r_total as f64)).collect();
    Ok(RankAllocation {
        ranks: order.into_iter().zip(ranks.into_iter().map(|r| r as usize)).collect(),
        r_total,
        strategy_used: Strategy::Pra,
        clamp_events,
        raw_shares,
    })
}

/// `avg_rank` for every matrix.
pub fn allocate_uniform(
    dims: &BTreeMap<WeightMatrixId, (usize, usize)>,
    cfg: &AllocationConfig,
) -> Result<RankAllocation, AllocError> {
    let r_total = feasible(dims, cfg)?;
    if dims.values().any(|d| cap(*d) < cfg.avg_rank) {
        return Err(AllocError::InfeasibleBudget {
            r_total,
            min_total: cfg.min_rank * dims.len(),
            max_total: dims.values().map(|d| cap(*d)).sum(),
        });
    }
    Ok(RankAllocation {
        ranks: dims.keys().map(|id| (*id, cfg.avg_rank)).collect(),
        r_total,
        strategy_used: Strategy::Uniform,
        clamp_events: Vec::new(),
        raw_shares: dims.keys().map(|id| (*id, cfg.avg_rank as f64)).collect(),
    })
}

/// Dispatch on `cfg.strategy`; uniform ignores θ apart from its id set.
pub fn allocate(
    theta: &BTreeMap<WeightMatrixId, f64>,
    dims: &BTreeMap<WeightMatrixId, (usize, usize)>,
    cfg: &AllocationConfig,
) -> Result<RankAllocation, AllocError> {
    match cfg.strategy {
        Strategy::Sra => allocate_sra(theta, dims, cfg),
        Strategy::Pra => allocate_pra(theta, dims, cfg),
        Strategy::Uniform => {
            if !theta.keys().eq(dims.keys()) {
                return Err(AllocError::MismatchedIdSets);
            }
            allocate_uniform(dims, cfg)
        }
    }
}

/// Every broken allocation invariant; empty when the allocation is sound.
pub fn validate_allocation(
    alloc: &RankAllocation,
    dims: &BTreeMap<WeightMatrixId, (usize, usize)>,
    cfg: &AllocationConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let sum: usize = alloc.ranks.values().sum();
    if sum != alloc.r_total {
        out.push(Violation::BudgetViolation {
            sum,
            r_total: alloc.r_total,
        });
    }
    let expected = cfg.r_total(dims.len());
    if alloc.r_total != expected {
        out.push(Violation::TotalMismatch {
            r_total: alloc.r_total,
            expected,
        });
    }
    for id in dims.keys().filter(|id| !alloc.ranks.contains_key(id)) {
        out.push(Violation::MissingId { matrix_id: *id });
    }
    for (id, rank) in &alloc.ranks {
        match dims.get(id) {
            None => out.push(Violation::UnknownId { matrix_id: *id }),
            Some(d) => {
                let max = cap(*d);
                if *rank < cfg.min_rank || *rank > max {
                    out.push(Violation::BoundViolation {
                        matrix_id: *id,
                        rank: *rank,
                        min: cfg.min_rank,
                        max,
                    });
                }
            }
        }
    }
    out
}
