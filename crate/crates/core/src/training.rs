//! Adaptive-moment optimization with step decay and decoupled weight decay,
//! and the epoch loop with best-validation selection.

pub mod checkpoint;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_logits, CompositionSpace, CurveSummary, EvalReport, Pair};
use crate::model::{gather_layers, gather_rows, CompositionModel, VisualInput};
use crate::numeric::rng::seeded;
use crate::numeric::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Items per evaluation forward pass.
    pub eval_batch: usize,
    /// Mixing weight of the inference rule used for validation.
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 5e-4,
            decay_factor: 0.5,
            decay_every: 5,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_batch: 256,
            beta: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return bad("train.epochs, train.batch_size and train.eval_batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return bad("train.decay_factor must lie in (0, 1] and train.decay_every be positive");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("invalid optimizer coefficients");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("train.beta must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Adam moments with decoupled weight decay; frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = |_| Vec::new();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    /// One update of every trainable parameter holding a gradient.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.trainable().collect();
        for id in ids {
            let k = id.0;
            let p = store.get_mut(id);
            let Some(g) = p.grad.as_ref() else { continue };
            let n = g.len();
            if self.m[k].is_empty() {
                self.m[k] = vec![0.0; n];
                self.v[k] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = p.value.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
        }
    }
}

/// A set of items: raw inputs, optional cached encoder layers, true pairs.
#[derive(Clone, Debug)]
pub struct Split {
    pub x: Tensor,
    pub labels: Vec<Pair>,
    pub layers: Option<Vec<Tensor>>,
}

impl Split {
    pub fn new(x: Tensor, labels: Vec<Pair>) -> Result<Self> {
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} labels for inputs {:?}",
                labels.len(),
                x.shape()
            )));
        }
        Ok(Self { x, labels, layers: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Caches encoder outputs when the encoder has nothing to train.
    pub fn cache_layers(&mut self, model: &CompositionModel) -> Result<()> {
        self.layers = if model.encoder_is_frozen() {
            Some(model.encode_layers(&self.x)?)
        } else {
            None
        };
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub state_loss: f64,
    pub object_loss: f64,
    pub composition_loss: f64,
    pub grad_norm: f64,
}

fn trainable_grad_norm(store: &ParamStore) -> f64 {
    store
        .trainable()
        .filter_map(|id| store.get(id).grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Forward on the seen-pair candidates, backward, and one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut CompositionModel,
    opt: &mut Adam,
    split: &Split,
    idx: &[usize],
    candidates: &[Pair],
    lr: f64,
    dropout_seed: u64,
    dropout_stream: u64,
) -> Result<StepStats> {
    let labels: Vec<Pair> = idx.iter().map(|&i| split.labels[i]).collect();
    let mut tape = Tape::train(dropout_seed, dropout_stream);
    let parts = match &split.layers {
        Some(all) => {
            let sub = gather_layers(all, idx)?;
            model.loss(&mut tape, VisualInput::Layers(&sub), &labels, candidates)?
        }
        None => {
            let sub = gather_rows(&split.x, idx)?;
            model.loss(&mut tape, VisualInput::Raw(&sub), &labels, candidates)?
        }
    };
    let stats = StepStats {
        loss: tape.scalar(parts.total),
        state_loss: tape.scalar(parts.state),
        object_loss: tape.scalar(parts.object),
        composition_loss: tape.scalar(parts.composition),
        grad_norm: 0.0,
    };
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} (state {}, object {}, composition {}, {} floored probabilities)",
            stats.loss, stats.state_loss, stats.object_loss, stats.composition_loss, parts.floored
        )));
    }
    model.store.zero_grads();
    tape.backward(parts.total)?;
    tape.accumulate_into(&mut model.store);
    let grad_norm = trainable_grad_norm(&model.store);
    opt.update(&mut model.store, lr);
    Ok(StepStats { grad_norm, ..stats })
}

/// Closed- or open-world evaluation of `split` against `space`.
pub fn evaluate_split(
    model: &CompositionModel,
    split: &Split,
    space: &CompositionSpace,
    beta: f64,
    eval_batch: usize,
) -> Result<EvalReport> {
    let cands = space.candidates();
    let logits = model.score(&split.x, split.layers.as_deref(), &cands, eval_batch)?;
    evaluate_logits(&logits, &cands, &split.labels, space, beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: CurveSummary,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: CurveSummary,
    pub steps: u64,
}

/// Trains on `train` (seen pairs), validates each epoch on `val` in
/// `val_space`, and leaves the best-validation-AUC weights in `model`.
pub fn fit(
    model: &mut CompositionModel,
    train: &Split,
    val: &Split,
    val_space: &CompositionSpace,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let candidates: Vec<Pair> = val_space.seen().to_vec();
    let mut opt = Adam::new(&model.store, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = seeded(seed, 20);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, CurveSummary, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let stream = 1000 + opt.step;
            let stats = train_step(model, &mut opt, train, chunk, &candidates, lr, seed, stream)?;
            total += stats.loss * chunk.len() as f64;
        }
        let val_report = evaluate_split(model, val, val_space, cfg.beta, cfg.eval_batch)?;
        let summary = val_report.curve.summary;
        history.push(EpochRecord { epoch, lr, train_loss: total / train.len() as f64, val: summary });
        if best.as_ref().is_none_or(|(_, b, _)| summary.auc > b.auc) {
            best = Some((epoch, summary, model.store.clone()));
        }
    }
    let (best_epoch, best_val, store) = best.expect("at least one epoch");
    model.store = store;
    model.store.zero_grads();
    Ok(FitResult { history, best_epoch, best_val, steps: opt.step })
}

#[cfg(test)]
mod tests;
