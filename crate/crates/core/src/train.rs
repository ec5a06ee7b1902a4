//! Multitask prompted training: teacher-forced token cross-entropy minimized
//! with Adam over shuffled mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::EncodedInstance;
use crate::error::{Error, Result};
use crate::fusion::GateValues;
use crate::model::Model;
use crate::params::{Graph, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Share of each training task held out for checkpoint selection.
    pub val_fraction: f64,
    pub templates_per_task: usize,
    pub template_seed: u64,
    /// Divide choice scores by their token count at evaluation.
    pub length_normalized: bool,
    /// Progress line on stderr every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_fraction: 0.1,
            templates_per_task: 2,
            template_seed: 0,
            length_normalized: false,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("train.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            v.push("train.eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            v.push("train.val_fraction must lie in [0, 1)".into());
        }
        if self.templates_per_task == 0 {
            v.push("train.templates_per_task must be positive".into());
        }
        v
    }
}

/// Adam with bias correction. Frozen parameters carry no state.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zero_grads(store),
            v: zero_grads(store),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update from `grads` (indexed like the store; empty for frozen).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if self.m[i].is_empty() {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for ((w, (mj, vj)), gj) in store.get_mut(id).data_mut().iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub gates: Option<GateValues>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

fn nan_guard(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NanLoss { epoch, batch },
        other => other,
    }
}

/// Loss of one batch and its gradient accumulated into `grads`. The loss is
/// summed token NLL over the batch divided by its target token count, so
/// every token weighs the same regardless of how instances are batched.
pub fn batch_gradient(model: &Model, batch: &[&EncodedInstance], grads: &mut [Vec<f64>]) -> Result<f64> {
    let total: usize = batch.iter().map(|b| b.target_tokens()).sum();
    if total == 0 {
        return Err(Error::Contract("batch has no target tokens".into()));
    }
    let scale = 1.0 / total as f64;
    let strategy = model.strategy();
    let mut loss_sum = 0.0;
    for inst in batch {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &model.store, true);
        let (loss, _) = model.nll(&mut g, strategy, &inst.x, &inst.target)?;
        loss_sum += g.value(loss).item();
        g.backward_scaled(loss, scale)?;
        for (id, grad) in g.param_grads() {
            let acc = &mut grads[id.index()];
            if acc.is_empty() {
                continue;
            }
            acc.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
        }
    }
    Ok(loss_sum * scale)
}

fn zero_grads(store: &ParamStore) -> Vec<Vec<f64>> {
    store
        .iter()
        .map(|(_, p)| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() })
        .collect()
}

/// Trains `model` on `data` for `cfg.epochs` epochs. Each epoch visits the
/// data in an order drawn from `seed` and the epoch number; `on_epoch` runs
/// after every epoch (checkpointing, validation).
pub fn train<F>(model: &mut Model, data: &[EncodedInstance], cfg: &TrainConfig, seed: u64, mut on_epoch: F) -> Result<TrainLog>
where
    F: FnMut(&Model, &EpochSummary) -> Result<()>,
{
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut opt = Adam::new(&model.store, cfg);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let mut grads = zero_grads(&model.store);
            let loss = batch_gradient(model, &batch, &mut grads).map_err(|e| nan_guard(e, epoch, b))?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            opt.step(&mut model.store, &grads);
            let step = log.steps.len();
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                eprintln!("epoch {epoch} step {step} loss {loss:.5}");
            }
            log.steps.push(StepLoss { step, epoch, batch: b, loss });
            epoch_loss += loss;
            batches += 1;
        }
        let gates = model.gate_values().ok();
        let summary = EpochSummary { epoch, mean_loss: epoch_loss / batches as f64, steps: batches, gates };
        on_epoch(model, &summary)?;
        log.epochs.push(summary);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -1.0]), true);
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        let mut opt = Adam::new(&store, &cfg);
        opt.step(&mut store, &[vec![3.0, -0.5]]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7, "{w:?}");
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0]), false);
        let mut opt = Adam::new(&store, &TrainConfig::default());
        opt.step(&mut store, &[Vec::new()]);
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn config_violations_enumerated() {
        let cfg = TrainConfig { epochs: 0, batch_size: 0, learning_rate: -1.0, ..Default::default() };
        assert_eq!(cfg.violations().len(), 3);
    }
}
