//! Low-rank adapters `ΔW = scale · B·A` over a frozen base model.

mod compare;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use compare::{compare_allocations, CompareContext, CompareError, ComparisonRow, ComparisonTable, StrategySummary};

use crate::alloc::RankAllocation;
use crate::id::WeightMatrixId;
use crate::model::{batches, Adam, Dataset, ForwardOutput, ModelError, ToyModel, TrainParams};
use crate::numerics::DenseMatrix;
use crate::rng::{rng_for, STREAM_LORA_INIT, STREAM_LORA_SHUFFLE};

/// Standard deviation of the Gaussian `A` initialisation.
pub const LORA_INIT_STD: f64 = 0.02;

const CHECKPOINT_FORMAT: &str = "slora-adapters";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoraError {
    #[error("allocation does not fit the model: {0}")]
    ShapeMismatch(String),
    #[error("adapters were already merged into the base model")]
    AlreadyMerged,
    #[error("adapter checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One adapter: `B` is `d1 × r`, `A` is `r × d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub b: DenseMatrix,
    pub a: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapterSet {
    base: ToyModel,
    adapters: BTreeMap<WeightMatrixId, LoraAdapter>,
    allocation: RankAllocation,
    scale: f64,
    seed: u64,
    merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub epochs: usize,
    pub allocation: RankAllocation,
    pub seed: u64,
    /// Full-training-set loss after each epoch.
    pub loss_curve: Vec<f64>,
    pub trainable_params: usize,
}

/// Adapters for every matrix with a non-zero rank; `A ~ N(0, 0.02²)` from
/// `seed`, `B = 0`, scale 1.
pub fn attach_lora(model: &ToyModel, alloc: &RankAllocation, seed: u64) -> Result<LoraAdapterSet, LoraError> {
    let dims = model.dims();
    if !alloc.ranks.keys().eq(dims.keys()) {
        return Err(LoraError::ShapeMismatch("allocation and model cover different matrices".into()));
    }
    let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
    let mut rng = rng_for(seed, STREAM_LORA_INIT);
    let mut adapters = BTreeMap::new();
    for (id, &rank) in &alloc.ranks {
        let (d1, d2) = dims[id];
        if rank > d1.min(d2) {
            return Err(LoraError::ShapeMismatch(format!("rank {rank} of {id} exceeds min({d1}, {d2})")));
        }
        if rank == 0 {
            continue;
        }
        let a = DenseMatrix::from_fn(rank, d2, |_, _| normal.sample(&mut rng));
        adapters.insert(
            *id,
            LoraAdapter {
                rank,
                b: DenseMatrix::zeros(d1, rank),
                a,
            },
        );
    }
    Ok(LoraAdapterSet {
        base: model.clone(),
        adapters,
        allocation: alloc.clone(),
        scale: 1.0,
        seed,
        merged: false,
    })
}

impl LoraAdapterSet {
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn base(&self) -> &ToyModel {
        &self.base
    }

    pub fn adapters(&self) -> &BTreeMap<WeightMatrixId, LoraAdapter> {
        &self.adapters
    }

    pub fn allocation(&self) -> &RankAllocation {
        &self.allocation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn rank(&self, id: WeightMatrixId) -> usize {
        self.adapters.get(&id).map_or(0, |a| a.rank)
    }

    /// `Σ r·(d1 + d2)`
    pub fn parameter_count(&self) -> usize {
        self.adapters.values().map(|a| a.rank * (a.b.rows() + a.a.cols())).sum()
    }

    /// `scale · B·A` for one matrix (zero when it has no adapter).
    pub fn delta(&self, id: WeightMatrixId) -> Result<DenseMatrix, LoraError> {
        let (d1, d2) = self.base.weight(id)?.shape();
        Ok(match self.adapters.get(&id) {
            Some(ad) => ad.b.matmul(&ad.a).scaled(self.scale),
            None => DenseMatrix::zeros(d1, d2),
        })
    }

    /// Base model with every `W` replaced by `W + scale·B·A`.
    pub fn effective_model(&self) -> ToyModel {
        let mut m = self.base.clone();
        for (id, ad) in &self.adapters {
            m.weight_mut(*id).add_scaled(&ad.b.matmul(&ad.a), self.scale);
        }
        m
    }

    pub fn forward(&self, batch: &Dataset, capture: bool) -> Result<ForwardOutput, LoraError> {
        Ok(self.effective_model().forward(batch, capture)?)
    }

    pub fn loss(&self, batch: &Dataset) -> Result<f64, LoraError> {
        Ok(self.effective_model().loss(batch)?)
    }

    /// Folds the adapters into a standalone model. The set can be merged once.
    pub fn merge(&mut self) -> Result<ToyModel, LoraError> {
        if self.merged {
            return Err(LoraError::AlreadyMerged);
        }
        self.merged = true;
        Ok(self.effective_model())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            adapters: self.clone(),
        })
        .expect("adapter set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LoraError> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| LoraError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(LoraError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck.adapters)
    }

    pub fn save(&self, path: &Path) -> Result<(), LoraError> {
        std::fs::write(path, self.to_json()).map_err(|e| LoraError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LoraError> {
        let s = std::fs::read_to_string(path).map_err(|e| LoraError::Checkpoint(e.to_string()))?;
        Self::from_json(&s)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    adapters: LoraAdapterSet,
}

/// Adam on the adapter factors only; base weights and biases stay frozen.
///
/// Batches are shuffled from the set's seed. `G = ∂L/∂W_eff` gives
/// `∂L/∂B = s·G·Aᵀ` and `∂L/∂A = s·Bᵀ·G`.
pub fn finetune_adapters(
    set: &mut LoraAdapterSet,
    train: &Dataset,
    eval: &Dataset,
    params: TrainParams,
) -> Result<FinetuneResult, LoraError> {
    finetune_adapters_with(set, train, eval, params, |_, _| {})
}

/// [`finetune_adapters`] calling `on_epoch(epoch, set)` after each epoch
/// (1-based).
pub fn finetune_adapters_with(
    set: &mut LoraAdapterSet,
    train: &Dataset,
    eval: &Dataset,
    params: TrainParams,
    mut on_epoch: impl FnMut(usize, &LoraAdapterSet),
) -> Result<FinetuneResult, LoraError> {
    if set.merged {
        return Err(LoraError::AlreadyMerged);
    }
    params.validate()?;
    train.check_compatible(set.base.spec())?;
    eval.check_compatible(set.base.spec())?;

    let initial_train_loss = set.loss(train)?;
    let mut opt = Adam::new(params.lr);
    let mut rng = rng_for(set.seed, STREAM_LORA_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let ids: Vec<WeightMatrixId> = set.adapters.keys().copied().collect();
    let s = set.scale;
    let mut loss_curve = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for idx in batches(&order, params.batch_size) {
            let batch = train.select(idx);
            let (loss, grads) = set.effective_model().loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch }.into());
            }
            opt.tick();
            for (k, id) in ids.iter().enumerate() {
                let g = &grads.weights[id];
                let ad = set.adapters.get_mut(id).expect("adapter id");
                let gb = g.matmul_t(&ad.a).scaled(s);
                let ga = ad.b.t_matmul(g).scaled(s);
                opt.update(2 * k, ad.b.data_mut(), gb.data());
                opt.update(2 * k + 1, ad.a.data_mut(), ga.data());
            }
        }
        let loss = set.loss(train)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch }.into());
        }
        loss_curve.push(loss);
        on_epoch(epoch + 1, set);
    }

    Ok(FinetuneResult {
        initial_train_loss,
        final_train_loss: *loss_curve.last().expect("epochs >= 1"),
        final_eval_loss: set.loss(eval)?,
        epochs: params.epochs,
        allocation: set.allocation.clone(),
        seed: set.seed,
        loss_curve,
        trainable_params: set.parameter_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::{allocate_uniform, AllocationConfig};
    use crate::model::{build_model, Activation, ModelSpec, Objective, Split, SynthKind, SynthTask};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 4,
            hidden_dims: vec![6, 5],
            attention_blocks: 0,
            seq_len: 1,
            output_dim: 3,
            activation: Activation::Tanh,
            task: Objective::RegressionMse,
            seed: 11,
        }
    }

    fn setup(avg: usize) -> (ToyModel, RankAllocation, Dataset) {
        let s = spec();
        let m = build_model(&s).unwrap();
        let cfg = AllocationConfig {
            avg_rank: avg,
            ..Default::default()
        };
        let alloc = allocate_uniform(&m.dims(), &cfg).unwrap();
        let task = SynthTask::new(SynthKind::MlpTeacher, s, 5).unwrap();
        (m, alloc, task.dataset(40, 1, Split::Train))
    }

    #[test]
    fn init_preserves_output_bit_for_bit() {
        let (m, alloc, data) = setup(2);
        let set = attach_lora(&m, &alloc, 3).unwrap();
        assert_eq!(set.forward(&data, false).unwrap().outputs, m.forward(&data, false).unwrap().outputs);
        for (id, ad) in set.adapters() {
            assert_eq!(ad.b.shape(), (m.dims()[id].0, 2));
            assert_eq!(ad.a.shape(), (2, m.dims()[id].1));
        }
        assert_eq!(set.parameter_count(), 2 * (6 + 4) + 2 * (5 + 6) + 2 * (3 + 5));
        let again = attach_lora(&m, &alloc, 3).unwrap();
        assert_eq!(set, again);
        assert_ne!(set.adapters(), attach_lora(&m, &alloc, 4).unwrap().adapters());
    }

    #[test]
    fn rank_zero_gets_no_adapter() {
        let (m, mut alloc, _) = setup(2);
        let first = *alloc.ranks.keys().next().unwrap();
        alloc.ranks.insert(first, 0);
        let set = attach_lora(&m, &alloc, 0).unwrap();
        assert!(!set.adapters().contains_key(&first));
        assert_eq!(set.rank(first), 0);
    }

    #[test]
    fn oversized_rank_is_rejected() {
        let (m, mut alloc, _) = setup(2);
        let first = *alloc.ranks.keys().next().unwrap();
        alloc.ranks.insert(first, 99);
        assert!(matches!(attach_lora(&m, &alloc, 0), Err(LoraError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (m, alloc, data) = setup(2);
        let mut set = attach_lora(&m, &alloc, 1).unwrap();
        let before = set.clone();
        let p = TrainParams {
            epochs: 3,
            lr: 0.0,
            batch_size: 8,
        };
        let r = finetune_adapters(&mut set, &data, &data, p).unwrap();
        assert_eq!(set, before);
        assert!(r.loss_curve.iter().all(|l| *l == r.initial_train_loss));
    }

    fn entry(s: &mut LoraAdapterSet, id: WeightMatrixId, which: usize) -> &mut f64 {
        let ad = s.adapters.get_mut(&id).unwrap();
        if which == 0 {
            &mut ad.a.data_mut()[0]
        } else {
            &mut ad.b.data_mut()[0]
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let (m, alloc, data) = setup(2);
        let mut set = attach_lora(&m, &alloc, 9).unwrap();
        for ad in set.adapters.values_mut() {
            ad.b = DenseMatrix::from_fn(ad.b.rows(), ad.b.cols(), |i, j| 0.1 * ((i + 2 * j) as f64).sin());
        }
        let set = set.with_scale(0.7);
        let (_, grads) = set.effective_model().loss_and_grads(&data).unwrap();
        let eps = 1e-6;
        for (id, ad) in set.adapters() {
            let g = &grads.weights[id];
            let ga = ad.b.t_matmul(g).scaled(set.scale);
            let gb = g.matmul_t(&ad.a).scaled(set.scale);
            for (which, analytic) in [(0, &ga), (1, &gb)] {
                let mut plus = set.clone();
                let mut minus = set.clone();
                *entry(&mut plus, *id, which) += eps;
                *entry(&mut minus, *id, which) -= eps;
                let fd = (plus.loss(&data).unwrap() - minus.loss(&data).unwrap()) / (2.0 * eps);
                let a = analytic.data()[0];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
                assert!(rel < 1e-5, "{id} {which}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn finetune_freezes_base_and_reduces_loss() {
        let (m, alloc, data) = setup(3);
        let mut set = attach_lora(&m, &alloc, 2).unwrap();
        let p = TrainParams {
            epochs: 60,
            lr: 1e-2,
            batch_size: 8,
        };
        let r = finetune_adapters(&mut set, &data, &data, p).unwrap();
        assert_eq!(set.base(), &m);
        assert_eq!(r.loss_curve.len(), 60);
        assert!(r.final_train_loss < 0.5 * r.initial_train_loss, "{r:?}");

        let mut again = attach_lora(&m, &alloc, 2).unwrap();
        assert_eq!(finetune_adapters(&mut again, &data, &data, p).unwrap(), r);
    }

    #[test]
    fn merge_matches_adapted_forward_and_is_single_use() {
        let (m, alloc, data) = setup(2);
        let mut set = attach_lora(&m, &alloc, 5).unwrap();
        assert_eq!(set.clone().merge().unwrap(), m);
        for ad in set.adapters.values_mut() {
            ad.b = DenseMatrix::from_fn(ad.b.rows(), ad.b.cols(), |i, j| 0.3 * ((3 * i + j) as f64).cos());
        }
        let adapted = set.forward(&data, false).unwrap().outputs;
        let merged = set.merge().unwrap();
        let direct = merged.forward(&data, false).unwrap().outputs;
        for (u, v) in adapted.data().iter().zip(direct.data()) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(v.abs()).max(1e-300));
        }
        assert_eq!(set.merge(), Err(LoraError::AlreadyMerged));
    }

    #[test]
    fn merged_weight_equals_split_product() {
        // (W + B·A)·x against W·x + B·(A·x)
        let (m, alloc, _) = setup(2);
        let mut set = attach_lora(&m, &alloc, 5).unwrap();
        for ad in set.adapters.values_mut() {
            ad.b = DenseMatrix::from_fn(ad.b.rows(), ad.b.cols(), |i, j| ((i * j) as f64 + 1.0).ln());
        }
        let merged = set.merge().unwrap();
        for (id, ad) in set.adapters() {
            let x = DenseMatrix::from_fn(ad.a.cols(), 1, |i, _| (i as f64 * 0.9).sin());
            let lhs = merged.weight(*id).unwrap().matmul(&x);
            let mut rhs = m.weight(*id).unwrap().matmul(&x);
            rhs.add_scaled(&ad.b.matmul(&ad.a.matmul(&x)), 1.0);
            for (u, v) in lhs.data().iter().zip(rhs.data()) {
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, alloc, _) = setup(2);
        let set = attach_lora(&m, &alloc, 5).unwrap().with_scale(0.5);
        assert_eq!(LoraAdapterSet::from_json(&set.to_json()).unwrap(), set);
        let bad = set.to_json().replace("\"version\":1", "\"version\":9");
        assert!(matches!(LoraAdapterSet::from_json(&bad), Err(LoraError::Checkpoint(_))));
    }
}
