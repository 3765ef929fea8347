use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, ModelError, ToyModel};
use crate::rng::{rng_for, STREAM_SHUFFLE};

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Starts a new step; call once before the `update`s of that step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates parameter group `slot` in place.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        if self.moments.len() <= slot {
            self.moments.resize(slot + 1, (Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.moments[slot];
        if m.is_empty() {
            *m = vec![0.0; params.len()];
            *v = vec![0.0; params.len()];
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 5e-4,
            batch_size: 32,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidSpec("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidSpec("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(ModelError::InvalidSpec("lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Splits a shuffled index list into mini-batches.
pub(crate) fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

/// Full-parameter Adam training (weights and biases).
pub fn train(model: &ToyModel, data: &Dataset, params: TrainParams) -> Result<ToyModel, ModelError> {
    Ok(train_with_history(model, data, params)?.0)
}

/// Like [`train`], also returning the full-data loss after each epoch.
pub fn train_with_history(
    model: &ToyModel,
    data: &Dataset,
    params: TrainParams,
) -> Result<(ToyModel, Vec<f64>), ModelError> {
    params.validate()?;
    data.check_compatible(model.spec())?;
    let mut model = model.clone();
    let mut opt = Adam::new(params.lr);
    let mut rng = rng_for(model.spec().seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let ids: Vec<_> = model.ids().collect();
    let biased: Vec<_> = model.biases().keys().copied().collect();
    let mut history = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for idx in batches(&order, params.batch_size) {
            let batch = data.select(idx);
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            opt.tick();
            for (slot, id) in ids.iter().enumerate() {
                opt.update(slot, model.weight_mut(*id).data_mut(), grads.weights[id].data());
            }
            for (k, id) in biased.iter().enumerate() {
                opt.update(ids.len() + k, model.bias_mut(*id), &grads.biases[id]);
            }
        }
        let loss = model.loss(data)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        history.push(loss);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation, ModelSpec, Objective, SynthKind, SynthTask};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 4,
            hidden_dims: vec![8],
            attention_blocks: 0,
            seq_len: 1,
            output_dim: 2,
            activation: Activation::Tanh,
            task: Objective::RegressionMse,
            seed: 3,
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(0.1);
        let mut p = vec![1.0, -1.0];
        opt.tick();
        opt.update(0, &mut p, &[2.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let s = spec();
        let task = SynthTask::new(SynthKind::Linreg, s.clone(), 1).unwrap();
        let data = task.dataset(64, 2, crate::model::Split::Train);
        let m = build_model(&s).unwrap();
        let p = TrainParams {
            epochs: 2,
            lr: 0.0,
            batch_size: 16,
        };
        assert_eq!(train(&m, &data, p).unwrap(), m);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let s = spec();
        let task = SynthTask::new(SynthKind::Linreg, s.clone(), 1).unwrap();
        let data = task.dataset(256, 2, crate::model::Split::Train);
        let m = build_model(&s).unwrap();
        let p = TrainParams {
            epochs: 200,
            lr: 5e-4,
            batch_size: 32,
        };
        let initial = m.loss(&data).unwrap();
        let (a, hist) = train_with_history(&m, &data, p).unwrap();
        let (b, _) = train_with_history(&m, &data, p).unwrap();
        assert_eq!(a, b);
        assert_eq!(hist.len(), 200);
        assert!(*hist.last().unwrap() < 0.1 * initial, "{initial} -> {hist:?}");
    }

    #[test]
    fn rejects_zero_epochs() {
        let s = spec();
        let task = SynthTask::new(SynthKind::Linreg, s.clone(), 1).unwrap();
        let data = task.dataset(8, 2, crate::model::Split::Train);
        let p = TrainParams {
            epochs: 0,
            ..TrainParams::default()
        };
        assert!(train(&build_model(&s).unwrap(), &data, p).is_err());
    }
}
