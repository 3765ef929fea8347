//! Deterministic synthetic tasks that stand in for real fine-tuning data.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_model, Dataset, ModelError, ModelSpec, Objective, Split, Targets, ToyModel};
use crate::id::{MatrixRole, WeightMatrixId};
use crate::numerics::DenseMatrix;
use crate::rng::{derive_seed, rng_for, STREAM_DELTA, STREAM_NOISE, STREAM_TEACHER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Targets linear in the flattened input.
    Linreg,
    /// Targets from an independently initialised network of the same shape.
    MlpTeacher,
    /// Targets from the base network plus low-rank updates confined to its
    /// high-curvature layers.
    HeterogeneousTeacher,
}

/// Zero-mean, unit-variance input laws, used as related calibration domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    Gaussian,
    Uniform,
    Laplace,
}

impl InputDistribution {
    pub fn name(self) -> &'static str {
        match self {
            InputDistribution::Gaussian => "gaussian",
            InputDistribution::Uniform => "uniform",
            InputDistribution::Laplace => "laplace",
        }
    }

    fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            InputDistribution::Gaussian => gaussian(rng),
            InputDistribution::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
            InputDistribution::Laplace => {
                // inverse CDF with scale 1/√2
                let u: f64 = rng.random_range(-0.5..0.5);
                -u.signum() * (1.0 - 2.0 * u.abs()).ln() / 2f64.sqrt()
            }
        }
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Input energy of the first amplified (high-curvature) layer.
pub const HOT_ENERGY: f64 = 32.0;
/// Input energy of the first attenuated (low-curvature) layer.
pub const COLD_ENERGY: f64 = 1.0 / 32.0;
/// Each later layer of the same kind sits this factor further from 1.
pub const ENERGY_STEP: f64 = 8.0;
/// Input energy of the head.
pub const HEAD_ENERGY: f64 = 1.0 / 8.0;
/// Frobenius norm of each teacher update relative to the base weight.
pub const DELTA_RELATIVE_NORM: f64 = 0.5;

/// A synthetic regression or classification task tied to a model spec.
#[derive(Debug, Clone)]
pub struct SynthTask {
    kind: SynthKind,
    spec: ModelSpec,
    task_seed: u64,
    noise_std: f64,
    input_distribution: InputDistribution,
    base: ToyModel,
    teacher: Teacher,
}

#[derive(Debug, Clone)]
enum Teacher {
    Linear(DenseMatrix),
    Network(ToyModel),
}

impl SynthTask {
    pub fn new(kind: SynthKind, spec: ModelSpec, task_seed: u64) -> Result<Self, ModelError> {
        let (base, teacher) = match kind {
            SynthKind::Linreg => {
                let base = build_model(&spec)?;
                let fan_in = spec.flat_input_dim();
                let mut rng = rng_for(task_seed, STREAM_TEACHER);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let w = DenseMatrix::from_fn(spec.output_dim, fan_in, |_, _| {
                    scale * gaussian(&mut rng)
                });
                (base, Teacher::Linear(w))
            }
            SynthKind::MlpTeacher => {
                let base = build_model(&spec)?;
                let mut ts = spec.clone();
                ts.seed = derive_seed(task_seed, STREAM_TEACHER);
                (base, Teacher::Network(build_model(&ts)?))
            }
            SynthKind::HeterogeneousTeacher => {
                let base = heterogeneous_base(&spec)?;
                let teacher = add_teacher_deltas(&base, task_seed);
                (base, Teacher::Network(teacher))
            }
        };
        Ok(Self {
            kind,
            spec,
            task_seed,
            noise_std: 0.01,
            input_distribution: InputDistribution::Gaussian,
            base,
            teacher,
        })
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn with_input_distribution(mut self, dist: InputDistribution) -> Self {
        self.input_distribution = dist;
        self
    }

    pub fn kind(&self) -> SynthKind {
        self.kind
    }

    pub fn task_seed(&self) -> u64 {
        self.task_seed
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// The pre-trained starting point that fine-tuning adapts.
    pub fn base_model(&self) -> &ToyModel {
        &self.base
    }

    /// The network generating targets, when the task has one.
    pub fn teacher_model(&self) -> Option<&ToyModel> {
        match &self.teacher {
            Teacher::Network(m) => Some(m),
            Teacher::Linear(_) => None,
        }
    }

    /// The exact linear map of a `linreg` task.
    pub fn linear_map(&self) -> Option<&DenseMatrix> {
        match &self.teacher {
            Teacher::Linear(w) => Some(w),
            Teacher::Network(_) => None,
        }
    }

    /// Matrices whose teacher weights differ from the base.
    pub fn shifted_ids(&self) -> Vec<WeightMatrixId> {
        match &self.teacher {
            Teacher::Network(t) if self.kind == SynthKind::HeterogeneousTeacher => t
                .weights()
                .iter()
                .filter(|(id, w)| self.base.weights()[*id] != **w)
                .map(|(id, _)| *id)
                .collect(),
            _ => Vec::new(),
        }
    }

    /// `n` samples drawn from the task's own input law.
    pub fn dataset(&self, n: usize, seed: u64, split: Split) -> Dataset {
        self.dataset_from(n, seed, split, self.input_distribution)
    }

    pub fn dataset_from(
        &self,
        n: usize,
        seed: u64,
        split: Split,
        dist: InputDistribution,
    ) -> Dataset {
        let mut rng = rng_for(seed, 0);
        let inputs = DenseMatrix::from_fn(n.max(1), self.spec.flat_input_dim(), |_, _| {
            dist.sample(&mut rng)
        });
        self.label(inputs, seed, split)
    }

    /// Targets for the given inputs (noise drawn from `seed`).
    pub fn label(&self, inputs: DenseMatrix, seed: u64, split: Split) -> Dataset {
        let mut outputs = match &self.teacher {
            Teacher::Linear(w) => inputs.matmul_t(w),
            Teacher::Network(t) => {
                let zeros = DenseMatrix::zeros(inputs.rows(), self.spec.output_dim);
                let probe = match self.spec.task {
                    Objective::RegressionMse => Targets::Values(zeros),
                    Objective::ClassificationCe => Targets::Labels(vec![0; inputs.rows()]),
                };
                let d = Dataset::new(inputs.clone(), probe, split).expect("non-empty inputs");
                t.forward(&d, false).expect("teacher matches spec").outputs
            }
        };
        let mut rng = rng_for(seed, STREAM_NOISE);
        for v in outputs.data_mut() {
            *v += self.noise_std * gaussian(&mut rng);
        }
        let targets = match self.spec.task {
            Objective::RegressionMse => Targets::Values(outputs),
            Objective::ClassificationCe => Targets::Labels(
                (0..outputs.rows())
                    .map(|i| {
                        let r = outputs.row(i);
                        (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best })
                    })
                    .collect(),
            ),
        };
        Dataset::new(inputs, targets, split).expect("targets sized from inputs")
    }
}

/// Samples a dataset of the given kind with `task_seed = spec.seed`.
pub fn synth_dataset(
    kind: SynthKind,
    spec: &ModelSpec,
    n: usize,
    seed: u64,
) -> Result<Dataset, ModelError> {
    Ok(SynthTask::new(kind, spec.clone(), spec.seed)?.dataset(n, seed, Split::Train))
}

/// Target input energy of each hidden matrix and, last, of the head:
/// odd layers amplified, even layers attenuated, with every level distinct
/// so the matrices have well-separated curvature.
fn energy_profile(hidden: usize) -> Vec<f64> {
    let mut e = vec![1.0];
    for l in 1..hidden {
        e.push(if l % 2 == 1 {
            HOT_ENERGY / ENERGY_STEP.powi((l as i32 - 1) / 2)
        } else {
            COLD_ENERGY / ENERGY_STEP.powi(l as i32 / 2 - 1)
        });
    }
    e.push(HEAD_ENERGY);
    e
}

/// Base network whose layers are rescaled so consecutive weight matrices
/// see very different input energies. With ReLU and zero biases the
/// overall function is unchanged because the gains multiply to one.
fn heterogeneous_base(spec: &ModelSpec) -> Result<ToyModel, ModelError> {
    if spec.hidden_dims.len() < 2 {
        return Err(ModelError::InvalidSpec(
            "heterogeneous_teacher needs at least 2 hidden layers".into(),
        ));
    }
    let mut model = build_model(spec)?;
    let energy = energy_profile(spec.hidden_dims.len());
    for l in 0..spec.hidden_dims.len() {
        let gain = (energy[l + 1] / energy[l]).sqrt();
        let role = if l == 0 {
            MatrixRole::FfnIn
        } else {
            MatrixRole::FfnOut
        };
        let w = model.weight_mut(WeightMatrixId::new(l, role));
        for v in w.data_mut() {
            *v *= gain;
        }
    }
    let head = model.weight_mut(WeightMatrixId::new(spec.head_layer(), MatrixRole::Head));
    for v in head.data_mut() {
        *v /= HEAD_ENERGY.sqrt();
    }
    Ok(model)
}

/// Adds a rank-`min(d1,d2)/2` update to every matrix fed by an amplified layer.
fn add_teacher_deltas(base: &ToyModel, task_seed: u64) -> ToyModel {
    let mut teacher = base.clone();
    let energy = energy_profile(base.spec().hidden_dims.len());
    let mut rng = rng_for(task_seed, STREAM_DELTA);
    for (l, e) in energy.iter().enumerate().take(base.spec().hidden_dims.len()).skip(1) {
        if *e <= 1.0 {
            continue;
        }
        let id = WeightMatrixId::new(l, MatrixRole::FfnOut);
        let w = teacher.weight_mut(id);
        let (d1, d2) = w.shape();
        let r = (d1.min(d2) / 2).max(1);
        let u = DenseMatrix::from_fn(d1, r, |_, _| gaussian(&mut rng));
        let v = DenseMatrix::from_fn(r, d2, |_, _| gaussian(&mut rng));
        let delta = u.matmul(&v);
        let s = DELTA_RELATIVE_NORM * w.frobenius_norm() / delta.frobenius_norm();
        w.add_scaled(&delta, s);
    }
    teacher
}
