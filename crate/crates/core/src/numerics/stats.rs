use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::NumericsError;
use crate::id::WeightMatrixId;

/// Arithmetic mean and population standard deviation (divides by `n`).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Exactly-equal inputs must give σ = 0, so short-circuit before the
    // subtraction, which can leave rounding residue.
    if values.iter().all(|v| *v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Positions of `values` sorted descending; ties keep ascending position.
pub fn sort_desc_indices(values: &[f64]) -> Result<Vec<usize>, NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    Ok(idx)
}

/// Matrix ids sorted by a score, most important first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixOrdering {
    items: Vec<WeightMatrixId>,
}

impl MatrixOrdering {
    /// Rejects duplicate ids.
    pub fn new(items: Vec<WeightMatrixId>) -> Result<Self, NumericsError> {
        let mut seen = items.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != items.len() {
            return Err(NumericsError::MismatchedIdSets);
        }
        Ok(Self { items })
    }

    /// Descending by score; equal scores fall back to id order.
    pub fn from_scores(scores: &BTreeMap<WeightMatrixId, f64>) -> Result<Self, NumericsError> {
        let ids: Vec<WeightMatrixId> = scores.keys().copied().collect();
        let values: Vec<f64> = scores.values().copied().collect();
        let order = sort_desc_indices(&values)?;
        Ok(Self {
            items: order.into_iter().map(|i| ids[i]).collect(),
        })
    }

    pub fn items(&self) -> &[WeightMatrixId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self {
            items: self.items.iter().rev().copied().collect(),
        }
    }
}

/// Kendall's τ-a between two orderings of the same id set.
pub fn kendall_tau(a: &MatrixOrdering, b: &MatrixOrdering) -> Result<f64, NumericsError> {
    let n = a.len();
    if n != b.len() {
        return Err(NumericsError::MismatchedIdSets);
    }
    if n < 2 {
        return Err(NumericsError::TooFewItems { min: 2, got: n });
    }
    let pos_b: HashMap<WeightMatrixId, usize> =
        b.items.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let ranks: Vec<usize> = a
        .items
        .iter()
        .map(|id| pos_b.get(id).copied().ok_or(NumericsError::MismatchedIdSets))
        .collect::<Result<_, _>>()?;
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            if ranks[i] < ranks[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / pairs)
}
