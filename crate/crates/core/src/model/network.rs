use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ModelError, ModelSpec, Objective, Targets};
use crate::id::{MatrixRole, WeightMatrixId};
use crate::numerics::DenseMatrix;
use crate::rng::{rng_for, STREAM_INIT};

/// Per-matrix gradients of the batch-mean loss, same shapes as the weights.
pub type GradientSet = BTreeMap<WeightMatrixId, DenseMatrix>;

/// Gradients for weights and biases together.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: GradientSet,
    pub biases: BTreeMap<WeightMatrixId, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    /// Model outputs, `n × output_dim` (logits for classification).
    pub outputs: DenseMatrix,
    /// Input activations feeding each weight matrix (rows are tokens or
    /// pooled samples, columns are fan-in). Present when capture was asked.
    pub activations: Option<BTreeMap<WeightMatrixId, DenseMatrix>>,
}

/// Desk-scale trainable network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    spec: ModelSpec,
    weights: BTreeMap<WeightMatrixId, DenseMatrix>,
    biases: BTreeMap<WeightMatrixId, Vec<f64>>,
}

/// He-uniform initialised model; identical specs give bit-identical weights.
pub fn build_model(spec: &ModelSpec) -> Result<ToyModel, ModelError> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, STREAM_INIT);
    let mut weights = BTreeMap::new();
    for (id, (d1, d2)) in spec.matrix_dims() {
        let bound = (6.0 / d2 as f64).sqrt();
        let w = DenseMatrix::from_fn(d1, d2, |_, _| rng.random_range(-bound..bound));
        weights.insert(id, w);
    }
    let biases = spec
        .biased_ids()
        .into_iter()
        .map(|id| (id, vec![0.0; spec.matrix_dims()[&id].0]))
        .collect();
    Ok(ToyModel {
        spec: spec.clone(),
        weights,
        biases,
    })
}

struct FfnCache {
    input: DenseMatrix,
    pre: DenseMatrix,
}

struct AttnCache {
    input: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    /// Row-wise softmax weights, stacked per sample (`n·T × T`).
    probs: DenseMatrix,
    ctx: DenseMatrix,
}

struct Tape {
    ffn: Vec<FfnCache>,
    attn: Vec<AttnCache>,
    pooled: DenseMatrix,
    outputs: DenseMatrix,
}

impl ToyModel {
    /// Assembles a model from explicit parameters. Only dimensions are
    /// checked, so single-matrix models are allowed here.
    pub fn from_parts(
        spec: ModelSpec,
        weights: BTreeMap<WeightMatrixId, DenseMatrix>,
        biases: BTreeMap<WeightMatrixId, Vec<f64>>,
    ) -> Result<Self, ModelError> {
        spec.check_dims()?;
        let dims = spec.matrix_dims();
        if weights.len() != dims.len() {
            return Err(ModelError::ShapeMismatch {
                what: "weight matrix count",
                expected: dims.len(),
                found: weights.len(),
            });
        }
        for (id, &(d1, d2)) in &dims {
            let w = weights.get(id).ok_or(ModelError::UnknownMatrix(*id))?;
            if w.shape() != (d1, d2) {
                return Err(ModelError::ShapeMismatch {
                    what: "weight shape",
                    expected: d1 * d2,
                    found: w.rows() * w.cols(),
                });
            }
        }
        let biased = spec.biased_ids();
        if biases.len() != biased.len() {
            return Err(ModelError::ShapeMismatch {
                what: "bias vector count",
                expected: biased.len(),
                found: biases.len(),
            });
        }
        for id in biased {
            let b = biases.get(&id).ok_or(ModelError::UnknownMatrix(id))?;
            if b.len() != dims[&id].0 {
                return Err(ModelError::ShapeMismatch {
                    what: "bias length",
                    expected: dims[&id].0,
                    found: b.len(),
                });
            }
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    /// A single linear map `y = W·x` (zero bias) with the given objective.
    pub fn linear(weight: DenseMatrix, task: Objective) -> Result<Self, ModelError> {
        let spec = ModelSpec {
            input_dim: weight.cols(),
            hidden_dims: vec![],
            attention_blocks: 0,
            seq_len: 1,
            output_dim: weight.rows(),
            activation: super::Activation::Relu,
            task,
            seed: 0,
        };
        let id = WeightMatrixId::new(0, MatrixRole::Head);
        let biases = [(id, vec![0.0; weight.rows()])].into_iter().collect();
        let weights = [(id, weight)].into_iter().collect();
        Self::from_parts(spec, weights, biases)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn ids(&self) -> impl Iterator<Item = WeightMatrixId> + '_ {
        self.weights.keys().copied()
    }

    /// `(d1, d2)` per matrix.
    pub fn dims(&self) -> BTreeMap<WeightMatrixId, (usize, usize)> {
        self.weights.iter().map(|(id, w)| (*id, w.shape())).collect()
    }

    pub fn weights(&self) -> &BTreeMap<WeightMatrixId, DenseMatrix> {
        &self.weights
    }

    pub fn biases(&self) -> &BTreeMap<WeightMatrixId, Vec<f64>> {
        &self.biases
    }

    pub fn weight(&self, id: WeightMatrixId) -> Result<&DenseMatrix, ModelError> {
        self.weights.get(&id).ok_or(ModelError::UnknownMatrix(id))
    }

    pub fn set_weight(&mut self, id: WeightMatrixId, w: DenseMatrix) -> Result<(), ModelError> {
        let slot = self.weights.get_mut(&id).ok_or(ModelError::UnknownMatrix(id))?;
        if slot.shape() != w.shape() {
            return Err(ModelError::ShapeMismatch {
                what: "weight shape",
                expected: slot.rows() * slot.cols(),
                found: w.rows() * w.cols(),
            });
        }
        *slot = w;
        Ok(())
    }

    pub(crate) fn weight_mut(&mut self, id: WeightMatrixId) -> &mut DenseMatrix {
        self.weights.get_mut(&id).expect("known matrix id")
    }

    pub(crate) fn bias_mut(&mut self, id: WeightMatrixId) -> &mut Vec<f64> {
        self.biases.get_mut(&id).expect("biased matrix id")
    }

    pub fn set_bias(&mut self, id: WeightMatrixId, b: Vec<f64>) -> Result<(), ModelError> {
        let slot = self.biases.get_mut(&id).ok_or(ModelError::UnknownMatrix(id))?;
        if slot.len() != b.len() {
            return Err(ModelError::ShapeMismatch {
                what: "bias length",
                expected: slot.len(),
                found: b.len(),
            });
        }
        *slot = b;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(|w| w.data().len()).sum()
    }

    fn ffn_id(&self, l: usize) -> WeightMatrixId {
        let role = if l == 0 {
            MatrixRole::FfnIn
        } else {
            MatrixRole::FfnOut
        };
        WeightMatrixId::new(l, role)
    }

    fn head_id(&self) -> WeightMatrixId {
        WeightMatrixId::new(self.spec.head_layer(), MatrixRole::Head)
    }

    fn run(&self, inputs: &DenseMatrix) -> Tape {
        let spec = &self.spec;
        let n = inputs.rows();
        let t = spec.seq_len;
        let mut h = DenseMatrix::new(n * t, spec.input_dim, inputs.data().to_vec())
            .expect("input width checked by caller");

        let mut ffn = Vec::with_capacity(spec.hidden_dims.len());
        for l in 0..spec.hidden_dims.len() {
            let id = self.ffn_id(l);
            let mut pre = h.matmul_t(&self.weights[&id]);
            add_row_bias(&mut pre, &self.biases[&id]);
            let mut out = pre.clone();
            for v in out.data_mut() {
                *v = spec.activation.apply(*v);
            }
            ffn.push(FfnCache { input: h, pre });
            h = out;
        }

        let d = spec.model_width();
        let score_scale = 1.0 / (d as f64).sqrt();
        let mut attn = Vec::with_capacity(spec.attention_blocks);
        for b in 0..spec.attention_blocks {
            let layer = spec.hidden_dims.len() + b;
            let w = |role| &self.weights[&WeightMatrixId::new(layer, role)];
            let q = h.matmul_t(w(MatrixRole::AttnQ));
            let k = h.matmul_t(w(MatrixRole::AttnK));
            let v = h.matmul_t(w(MatrixRole::AttnV));
            let mut probs = DenseMatrix::zeros(n * t, t);
            let mut ctx = DenseMatrix::zeros(n * t, d);
            for s in 0..n {
                for i in 0..t {
                    let qi = q.row(s * t + i);
                    let row: Vec<f64> = (0..t)
                        .map(|j| crate::numerics::dot(qi, k.row(s * t + j)) * score_scale)
                        .collect();
                    let p = softmax(&row);
                    let c = ctx.row_mut(s * t + i);
                    for (j, pj) in p.iter().enumerate() {
                        for (cv, vv) in c.iter_mut().zip(v.row(s * t + j)) {
                            *cv += pj * vv;
                        }
                    }
                    probs.row_mut(s * t + i).copy_from_slice(&p);
                }
            }
            let o = ctx.matmul_t(w(MatrixRole::AttnO));
            let mut next = h.clone();
            next.add_scaled(&o, 1.0);
            attn.push(AttnCache {
                input: h,
                q,
                k,
                v,
                probs,
                ctx,
            });
            h = next;
        }

        let pooled = if t == 1 {
            h
        } else {
            let mut p = DenseMatrix::zeros(n, d);
            for s in 0..n {
                let dst = p.row_mut(s);
                for i in 0..t {
                    for (a, b) in dst.iter_mut().zip(h.row(s * t + i)) {
                        *a += b;
                    }
                }
                for a in dst.iter_mut() {
                    *a /= t as f64;
                }
            }
            p
        };

        let head = self.head_id();
        let mut outputs = pooled.matmul_t(&self.weights[&head]);
        add_row_bias(&mut outputs, &self.biases[&head]);
        Tape {
            ffn,
            attn,
            pooled,
            outputs,
        }
    }

    /// Batch-mean loss; with `capture`, also the input activations of every
    /// weight matrix.
    pub fn forward(&self, batch: &Dataset, capture: bool) -> Result<ForwardOutput, ModelError> {
        batch.check_compatible(&self.spec)?;
        let tape = self.run(batch.inputs());
        let (loss, _) = loss_and_seed(self.spec.task, &tape.outputs, batch.targets());
        let activations = capture.then(|| self.captured(&tape));
        Ok(ForwardOutput {
            loss,
            outputs: tape.outputs,
            activations,
        })
    }

    pub fn loss(&self, batch: &Dataset) -> Result<f64, ModelError> {
        Ok(self.forward(batch, false)?.loss)
    }

    fn captured(&self, tape: &Tape) -> BTreeMap<WeightMatrixId, DenseMatrix> {
        let mut acts = BTreeMap::new();
        for (l, c) in tape.ffn.iter().enumerate() {
            acts.insert(self.ffn_id(l), c.input.clone());
        }
        for (b, c) in tape.attn.iter().enumerate() {
            let layer = self.spec.hidden_dims.len() + b;
            for role in [MatrixRole::AttnQ, MatrixRole::AttnK, MatrixRole::AttnV] {
                acts.insert(WeightMatrixId::new(layer, role), c.input.clone());
            }
            acts.insert(WeightMatrixId::new(layer, MatrixRole::AttnO), c.ctx.clone());
        }
        acts.insert(self.head_id(), tape.pooled.clone());
        acts
    }

    /// Exact reverse-mode gradients of the batch-mean loss for weights.
    pub fn grad(&self, batch: &Dataset) -> Result<GradientSet, ModelError> {
        Ok(self.loss_and_grads(batch)?.1.weights)
    }

    pub fn loss_and_grads(&self, batch: &Dataset) -> Result<(f64, Gradients), ModelError> {
        batch.check_compatible(&self.spec)?;
        let tape = self.run(batch.inputs());
        let (loss, d_out) = loss_and_seed(self.spec.task, &tape.outputs, batch.targets());
        Ok((loss, self.backward(&tape, d_out)))
    }

    fn backward(&self, tape: &Tape, d_out: DenseMatrix) -> Gradients {
        let spec = &self.spec;
        let n = d_out.rows();
        let t = spec.seq_len;
        let d = spec.model_width();
        let mut wg = BTreeMap::new();
        let mut bg = BTreeMap::new();

        let head = self.head_id();
        wg.insert(head, d_out.t_matmul(&tape.pooled));
        bg.insert(head, d_out.col_sums());
        let d_pooled = d_out.matmul(&self.weights[&head]);

        let mut dh = if t == 1 {
            d_pooled
        } else {
            let mut g = DenseMatrix::zeros(n * t, d);
            for s in 0..n {
                for i in 0..t {
                    for (a, b) in g.row_mut(s * t + i).iter_mut().zip(d_pooled.row(s)) {
                        *a = b / t as f64;
                    }
                }
            }
            g
        };

        let score_scale = 1.0 / (d as f64).sqrt();
        for (b, c) in tape.attn.iter().enumerate().rev() {
            let layer = spec.hidden_dims.len() + b;
            let id = |role| WeightMatrixId::new(layer, role);
            let w = |role| &self.weights[&id(role)];

            // residual: h_out = h_in + ctx·Woᵀ
            let d_o = &dh;
            wg.insert(id(MatrixRole::AttnO), d_o.t_matmul(&c.ctx));
            let d_ctx = d_o.matmul(w(MatrixRole::AttnO));

            let mut d_q = DenseMatrix::zeros(n * t, d);
            let mut d_k = DenseMatrix::zeros(n * t, d);
            let mut d_v = DenseMatrix::zeros(n * t, d);
            for s in 0..n {
                for i in 0..t {
                    let r = s * t + i;
                    let p = c.probs.row(r);
                    let dc = d_ctx.row(r);
                    // dV_j += p_ij · dC_i ; dP_ij = dC_i · V_j
                    let mut dp = vec![0.0; t];
                    for j in 0..t {
                        dp[j] = crate::numerics::dot(dc, c.v.row(s * t + j));
                        for (a, g) in d_v.row_mut(s * t + j).iter_mut().zip(dc) {
                            *a += p[j] * g;
                        }
                    }
                    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        let ds = p[j] * (dp[j] - inner) * score_scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = c.k.row(s * t + j).to_vec();
                        for (a, kv) in d_q.row_mut(r).iter_mut().zip(&kj) {
                            *a += ds * kv;
                        }
                        let qi = c.q.row(r).to_vec();
                        for (a, qv) in d_k.row_mut(s * t + j).iter_mut().zip(&qi) {
                            *a += ds * qv;
                        }
                    }
                }
            }
            wg.insert(id(MatrixRole::AttnQ), d_q.t_matmul(&c.input));
            wg.insert(id(MatrixRole::AttnK), d_k.t_matmul(&c.input));
            wg.insert(id(MatrixRole::AttnV), d_v.t_matmul(&c.input));
            let mut d_in = dh.clone();
            d_in.add_scaled(&d_q.matmul(w(MatrixRole::AttnQ)), 1.0);
            d_in.add_scaled(&d_k.matmul(w(MatrixRole::AttnK)), 1.0);
            d_in.add_scaled(&d_v.matmul(w(MatrixRole::AttnV)), 1.0);
            dh = d_in;
        }

        for (l, c) in tape.ffn.iter().enumerate().rev() {
            let id = self.ffn_id(l);
            let mut dz = dh;
            for (g, z) in dz.data_mut().iter_mut().zip(c.pre.data()) {
                *g *= spec.activation.derivative(*z);
            }
            wg.insert(id, dz.t_matmul(&c.input));
            bg.insert(id, dz.col_sums());
            dh = if l > 0 {
                dz.matmul(&self.weights[&id])
            } else {
                DenseMatrix::zeros(0, 0)
            };
        }

        Gradients {
            weights: wg,
            biases: bg,
        }
    }
}

fn add_row_bias(m: &mut DenseMatrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loss and its gradient with respect to the outputs.
fn loss_and_seed(task: Objective, outputs: &DenseMatrix, targets: &Targets) -> (f64, DenseMatrix) {
    let n = outputs.rows() as f64;
    let mut seed = DenseMatrix::zeros(outputs.rows(), outputs.cols());
    let mut loss = 0.0;
    match (task, targets) {
        (Objective::RegressionMse, Targets::Values(t)) => {
            for ((g, y), tv) in seed.data_mut().iter_mut().zip(outputs.data()).zip(t.data()) {
                let r = y - tv;
                loss += r * r;
                *g = 2.0 * r / n;
            }
        }
        (Objective::ClassificationCe, Targets::Labels(labels)) => {
            for (s, &label) in labels.iter().enumerate() {
                let row = outputs.row(s);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[label];
                for (j, g) in seed.row_mut(s).iter_mut().enumerate() {
                    let p = (row[j] - lse).exp();
                    *g = (p - if j == label { 1.0 } else { 0.0 }) / n;
                }
            }
        }
        _ => unreachable!("target kind validated against objective"),
    }
    (loss / n, seed)
}
