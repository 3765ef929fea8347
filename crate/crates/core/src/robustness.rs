//! Stability of the θ ordering of weight matrices, measured with Kendall's
//! τ across calibration domains, calibration-set sizes and fine-tuning
//! epochs.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{allocate_uniform, AllocError, AllocationConfig, Strategy};
use crate::hessian::{probe_all, ProbeConfig, ProbeError};
use crate::id::{MatrixRole, WeightMatrixId};
use crate::lora::{attach_lora, finetune_adapters_with, LoraError};
use crate::metrics::{sensitivity_report, MetricError, MetricParams};
use crate::model::{
    build_model, gaussian, Activation, Dataset, InputDistribution, ModelError, ModelSpec, Objective, Split, SynthTask, Targets,
    ToyModel, TrainParams,
};
use crate::numerics::{kendall_tau, DenseMatrix, MatrixOrdering, NumericsError};
use crate::rng::{rng_for, STREAM_CONTROL, STREAM_SUBSET};

/// Fewest calibration rows any subset may have.
pub const MIN_SUBSET_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RobustnessError {
    #[error("invalid robustness config: {field} {reason}")]
    InvalidConfig {
        field: &'static str,
        reason: &'static str,
    },
    #[error("need at least 2 domains, got {0}")]
    TooFewDomains(usize),
    #[error("a {fraction} subset of {available} rows has fewer than {MIN_SUBSET_SAMPLES} samples")]
    SubsetTooSmall { fraction: f64, available: usize },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which data the epoch-stability check re-probes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprobeData {
    Calibration,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub subset_fractions: Vec<f64>,
    pub epoch_checkpoints: Vec<usize>,
    pub subset_seed: u64,
    pub reprobe_on: ReprobeData,
    /// Uniform rank used when fine-tuning for the epoch check.
    pub epoch_avg_rank: usize,
    pub epoch_lora_seed: u64,
    pub cross_domain_threshold: f64,
    pub subset_threshold: f64,
    pub epoch_threshold: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            subset_fractions: vec![0.1, 0.2, 0.5, 1.0],
            epoch_checkpoints: (0..=5).collect(),
            subset_seed: 0,
            reprobe_on: ReprobeData::Calibration,
            epoch_avg_rank: 4,
            epoch_lora_seed: 0,
            cross_domain_threshold: 0.9,
            subset_threshold: 0.95,
            epoch_threshold: 0.9,
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<(), RobustnessError> {
        let f = &self.subset_fractions;
        if f.is_empty() || f.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
            return Err(RobustnessError::InvalidConfig {
                field: "subset_fractions",
                reason: "must be non-empty and within (0, 1]",
            });
        }
        if f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RobustnessError::InvalidConfig {
                field: "subset_fractions",
                reason: "must be strictly increasing",
            });
        }
        if *f.last().expect("non-empty") != 1.0 {
            return Err(RobustnessError::InvalidConfig {
                field: "subset_fractions",
                reason: "must end at 1.0",
            });
        }
        let e = &self.epoch_checkpoints;
        if e.first() != Some(&0) || e.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RobustnessError::InvalidConfig {
                field: "epoch_checkpoints",
                reason: "must start at 0 and be strictly increasing",
            });
        }
        for (field, t) in [
            ("cross_domain_threshold", self.cross_domain_threshold),
            ("subset_threshold", self.subset_threshold),
            ("epoch_threshold", self.epoch_threshold),
        ] {
            if !(-1.0..=1.0).contains(&t) {
                return Err(RobustnessError::InvalidConfig {
                    field,
                    reason: "must be within [-1, 1]",
                });
            }
        }
        Ok(())
    }
}

/// Settings every probe in the suite shares.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OrderingSettings {
    pub probe: ProbeConfig,
    pub metrics: MetricParams,
}

/// Matrices of `model` ordered by θ measured on `calib`, most sensitive first.
pub fn theta_ordering(
    model: &ToyModel,
    calib: &Dataset,
    settings: &OrderingSettings,
) -> Result<MatrixOrdering, RobustnessError> {
    let diags = probe_all(model, calib, &settings.probe)?;
    Ok(sensitivity_report(&diags, &settings.metrics)?.ordering())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDataset {
    pub name: String,
    pub data: Dataset,
}

/// Symmetric τ table with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl TauMatrix {
    pub fn min_off_diagonal(&self) -> f64 {
        let n = self.names.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetTau {
    pub fraction: f64,
    pub samples: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTau {
    pub epoch: usize,
    pub tau: f64,
}

/// Pairwise τ between the θ orderings measured on each domain.
pub fn cross_domain_tau(
    model: &ToyModel,
    domains: &[NamedDataset],
    settings: &OrderingSettings,
) -> Result<TauMatrix, RobustnessError> {
    if domains.len() < 2 {
        return Err(RobustnessError::TooFewDomains(domains.len()));
    }
    let orderings = domains
        .par_iter()
        .map(|d| theta_ordering(model, &d.data, settings))
        .collect::<Result<Vec<_>, _>>()?;
    let n = domains.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let t = kendall_tau(&orderings[i], &orderings[j])?;
            values[i][j] = t;
            values[j][i] = t;
        }
    }
    Ok(TauMatrix {
        names: domains.iter().map(|d| d.name.clone()).collect(),
        values,
    })
}

/// τ of each prefix of one seeded shuffle of `calib` against the full set.
pub fn subset_size_tau(
    model: &ToyModel,
    calib: &Dataset,
    cfg: &RobustnessConfig,
    settings: &OrderingSettings,
) -> Result<Vec<SubsetTau>, RobustnessError> {
    cfg.validate()?;
    let n = calib.len();
    let sizes: Vec<usize> = cfg
        .subset_fractions
        .iter()
        .map(|f| (f * n as f64).floor() as usize)
        .collect();
    if let Some((f, _)) = cfg
        .subset_fractions
        .iter()
        .zip(&sizes)
        .find(|(_, s)| **s < MIN_SUBSET_SAMPLES)
    {
        return Err(RobustnessError::SubsetTooSmall {
            fraction: *f,
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(cfg.subset_seed, STREAM_SUBSET));
    let shuffled = calib.select(&order);
    let full = theta_ordering(model, &shuffled, settings)?;
    cfg.subset_fractions
        .par_iter()
        .zip(sizes.par_iter())
        .map(|(&fraction, &samples)| {
            let tau = if samples == n {
                1.0
            } else {
                kendall_tau(&theta_ordering(model, &shuffled.prefix(samples), settings)?, &full)?
            };
            Ok(SubsetTau { fraction, samples, tau })
        })
        .collect()
}

/// τ of the merged model's ordering at each checkpoint epoch against the
/// base model's, while uniform-rank adapters are fine-tuned on `train`.
pub fn epoch_stability_tau(
    model: &ToyModel,
    train: &Dataset,
    calib: &Dataset,
    cfg: &RobustnessConfig,
    finetune: TrainParams,
    settings: &OrderingSettings,
) -> Result<Vec<EpochTau>, RobustnessError> {
    cfg.validate()?;
    let last = *cfg.epoch_checkpoints.last().expect("validated");
    let probe_data = match cfg.reprobe_on {
        ReprobeData::Calibration => calib,
        ReprobeData::Train => train,
    };
    let mut snapshots: Vec<(usize, ToyModel)> = vec![(0, model.clone())];
    if last > 0 {
        let alloc_cfg = AllocationConfig {
            avg_rank: cfg.epoch_avg_rank,
            min_rank: cfg.epoch_avg_rank.min(1),
            strategy: Strategy::Uniform,
            ..Default::default()
        };
        let alloc = allocate_uniform(&model.dims(), &alloc_cfg)?;
        let mut set = attach_lora(model, &alloc, cfg.epoch_lora_seed)?;
        let params = TrainParams {
            epochs: last,
            ..finetune
        };
        finetune_adapters_with(&mut set, train, train, params, |epoch, s| {
            if cfg.epoch_checkpoints.contains(&epoch) {
                snapshots.push((epoch, s.effective_model()));
            }
        })?;
    }
    let orderings = snapshots
        .par_iter()
        .map(|(_, m)| theta_ordering(m, probe_data, settings))
        .collect::<Result<Vec<_>, _>>()?;
    snapshots
        .iter()
        .zip(&orderings)
        .map(|((epoch, _), o)| {
            Ok(EpochTau {
                epoch: *epoch,
                tau: kendall_tau(o, &orderings[0])?,
            })
        })
        .collect()
}

/// Related calibration domains: the task's inputs drawn from Gaussian,
/// uniform and Laplace distributions (all unit variance), labelled by the
/// same teacher.
pub fn related_domains(task: &SynthTask, n: usize, seed: u64) -> Vec<NamedDataset> {
    [
        InputDistribution::Gaussian,
        InputDistribution::Uniform,
        InputDistribution::Laplace,
    ]
    .into_iter()
    .map(|dist| NamedDataset {
        name: dist.name().to_string(),
        data: task.dataset_from(n, seed, Split::Calibration, dist),
    })
    .collect()
}

/// Per-layer weight gain of the growing channel; masking and ReLU each
/// halve the signal energy, so the net energy factor is `gain² / 4`.
const CONTROL_GAIN: f64 = 4.0;

/// Negative control: a network built from two disjoint channels over
/// orthogonal halves of the input space. One channel grows its signal
/// layer by layer, the other shrinks it, so calibrating on either half
/// yields opposite θ orderings.
pub fn orthogonal_control(n: usize, seed: u64) -> Result<(ToyModel, [NamedDataset; 2]), RobustnessError> {
    let width = 8;
    let spec = ModelSpec {
        input_dim: width,
        hidden_dims: vec![width; 5],
        attention_blocks: 0,
        seq_len: 1,
        output_dim: 2,
        activation: Activation::Relu,
        task: Objective::RegressionMse,
        seed,
    };
    let mut model = build_model(&spec)?;
    let half = width / 2;
    for l in 0..spec.hidden_dims.len() {
        let role = if l == 0 { MatrixRole::FfnIn } else { MatrixRole::FfnOut };
        let w = model.weight_mut(WeightMatrixId::new(l, role));
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let (gi, gj) = (i < half, j < half);
                let v = if gi != gj {
                    0.0
                } else if gi {
                    CONTROL_GAIN * w.get(i, j)
                } else {
                    w.get(i, j) / CONTROL_GAIN
                };
                w.set(i, j, v);
            }
        }
    }

    let mut rng = rng_for(seed, STREAM_CONTROL);
    let mut domain = |name: &str, lo: usize| -> Result<NamedDataset, RobustnessError> {
        let x = DenseMatrix::from_fn(n, width, |_, j| {
            if j >= lo && j < lo + half {
                gaussian(&mut rng)
            } else {
                0.0
            }
        });
        let y = Targets::Values(DenseMatrix::zeros(n, spec.output_dim));
        Ok(NamedDataset {
            name: name.to_string(),
            data: Dataset::new(x, y, Split::Calibration)?,
        })
    };
    let a = domain("lower_half", 0)?;
    let b = domain("upper_half", half)?;
    Ok((model, [a, b]))
}
