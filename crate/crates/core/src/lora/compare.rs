use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attach_lora, finetune_adapters, LoraError};
use crate::alloc::{allocate, validate_allocation, AllocError, AllocationConfig, RankAllocation, Strategy};
use crate::hessian::{probe_all, ProbeConfig, ProbeError};
use crate::metrics::{sensitivity_report, MetricError, MetricParams, SensitivityReport};
use crate::model::{Dataset, ToyModel, TrainParams};
use crate::numerics::mean_std;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompareError {
    #[error("invalid comparison: {0}")]
    InvalidRunMatrix(String),
    #[error("allocation for {strategy} failed its audit: {detail}")]
    AuditFailed { strategy: Strategy, detail: String },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Lora(#[from] LoraError),
}

/// Everything a comparison shares across strategies and seeds.
#[derive(Debug, Clone)]
pub struct CompareContext<'a> {
    pub model: &'a ToyModel,
    pub train: &'a Dataset,
    pub calibration: &'a Dataset,
    pub eval: &'a Dataset,
    pub probe: ProbeConfig,
    pub metrics: MetricParams,
    pub finetune: TrainParams,
    pub lora_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub r_total: usize,
    pub trainable_params: usize,
    pub initial_train_loss: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub runs: usize,
    pub mean_train_loss: f64,
    pub mean_eval_loss: f64,
    /// Population standard deviation over seeds.
    pub std_eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub r_total: usize,
    pub sensitivity: SensitivityReport,
    pub allocations: Vec<RankAllocation>,
    pub rows: Vec<ComparisonRow>,
    pub summaries: Vec<StrategySummary>,
}

impl ComparisonTable {
    pub fn summary(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == strategy)
    }

    pub fn row(&self, strategy: Strategy, seed: u64) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.seed == seed)
    }
}

/// Probe → metrics → allocate → attach → fine-tune → evaluate for every
/// (strategy, seed) pair.
///
/// The probe and metrics depend only on the base model and calibration set,
/// so they are computed once; the seed drives adapter initialisation and
/// batch order. Runs execute in parallel and are reported in input order.
pub fn compare_allocations(
    ctx: &CompareContext<'_>,
    cfgs: &[AllocationConfig],
    seeds: &[u64],
) -> Result<ComparisonTable, CompareError> {
    if cfgs.len() < 2 {
        return Err(CompareError::InvalidRunMatrix("need at least 2 strategies".into()));
    }
    if seeds.len() < 3 {
        return Err(CompareError::InvalidRunMatrix("need at least 3 seeds".into()));
    }
    let mut strategies: Vec<Strategy> = cfgs.iter().map(|c| c.strategy).collect();
    strategies.sort();
    strategies.dedup();
    if strategies.len() != cfgs.len() {
        return Err(CompareError::InvalidRunMatrix("duplicate strategy".into()));
    }

    let diags = probe_all(ctx.model, ctx.calibration, &ctx.probe)?;
    let sensitivity = sensitivity_report(&diags, &ctx.metrics)?;
    let theta = sensitivity.theta();
    let dims = ctx.model.dims();

    let mut allocations = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let alloc = allocate(&theta, &dims, cfg)?;
        let violations = validate_allocation(&alloc, &dims, cfg);
        if !violations.is_empty() {
            return Err(CompareError::AuditFailed {
                strategy: cfg.strategy,
                detail: format!("{violations:?}"),
            });
        }
        allocations.push(alloc);
    }
    let r_total = allocations[0].r_total;
    if allocations.iter().any(|a| a.r_total != r_total) {
        return Err(CompareError::InvalidRunMatrix("strategies must share one rank budget".into()));
    }

    let jobs: Vec<(usize, u64)> = (0..cfgs.len()).flat_map(|k| seeds.iter().map(move |s| (k, *s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(k, seed)| -> Result<ComparisonRow, CompareError> {
            let alloc = &allocations[k];
            let mut set = attach_lora(ctx.model, alloc, seed)?.with_scale(ctx.lora_scale);
            let r = finetune_adapters(&mut set, ctx.train, ctx.eval, ctx.finetune)?;
            Ok(ComparisonRow {
                strategy: alloc.strategy_used,
                seed,
                r_total: alloc.r_total,
                trainable_params: r.trainable_params,
                initial_train_loss: r.initial_train_loss,
                train_loss: r.final_train_loss,
                eval_loss: r.final_eval_loss,
                loss_curve: r.loss_curve,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let summaries = cfgs
        .iter()
        .map(|cfg| {
            let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| r.strategy == cfg.strategy).collect();
            let eval: Vec<f64> = mine.iter().map(|r| r.eval_loss).collect();
            let train: Vec<f64> = mine.iter().map(|r| r.train_loss).collect();
            let (mean_eval_loss, std_eval_loss) = mean_std(&eval).expect("seeds non-empty");
            StrategySummary {
                strategy: cfg.strategy,
                runs: mine.len(),
                mean_train_loss: train.iter().sum::<f64>() / train.len() as f64,
                mean_eval_loss,
                std_eval_loss,
            }
        })
        .collect();

    Ok(ComparisonTable {
        r_total,
        sensitivity,
        allocations,
        rows,
        summaries,
    })
}
