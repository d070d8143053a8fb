//! Composite-loss training with AdamW, linear warmup and decay, and
//! gradient clipping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::DecodeMode;
use crate::document::HybridDocument;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, Overrides};
use crate::expression::ScaleConvention;
use crate::kernel::{Gradients, ParamStore, Session, Tape, Tensor};
use crate::model::{LossParts, LossToggles, Model, ModelConfig, PredictOptions, TrainingExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub seed: u64,
    pub toggles: LossToggles,
    /// Evaluate on the dev set every this many epochs (the last epoch is
    /// always evaluated).
    pub eval_every: usize,
    /// Stop after an evaluation whose EM reaches this value.
    pub stop_at_em: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            clip_norm: 5.0,
            dropout: 0.5,
            seed: 42,
            toggles: LossToggles::default(),
            eval_every: 1,
            stop_at_em: None,
        }
    }
}

impl TrainConfig {
    /// Settings that memorise a few dozen questions at `d = 64` within a
    /// hundred epochs.
    pub fn small_data() -> Self {
        Self {
            epochs: 300,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            warmup_fraction: 0.05,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.eps, self.clip_norm];
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || positive.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Config("epochs, batch size, learning rate, eps and clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup fraction must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.weight_decay < 0.0 {
            return Err(Error::Config("dropout must lie in [0, 1) and weight decay be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total`: linear ramp from 0 over
/// the warmup steps, then linear decay to 0 at `total`.
pub fn learning_rate_at(config: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = (config.warmup_fraction * total as f64).floor() as usize;
    if step < warmup {
        return config.learning_rate * step as f64 / warmup as f64;
    }
    let remaining = total.saturating_sub(warmup).max(1);
    config.learning_rate * (total.saturating_sub(step)) as f64 / remaining as f64
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamW {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// Clips the accumulated gradients to `clip_norm` and applies one
    /// decoupled-weight-decay Adam update. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, config: &TrainConfig) -> Result<f64> {
        let norm = store.grad_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        if norm > config.clip_norm {
            store.scale_grads(config.clip_norm / norm);
        }
        self.steps += 1;
        let c1 = 1.0 - config.beta1.powi(self.steps);
        let c2 = 1.0 - config.beta2.powi(self.steps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * (mh / (vh.sqrt() + config.eps) + config.weight_decay * w[i]);
            }
        }
        Ok(norm)
    }
}

/// One-step helper: clip, update, and clear the gradients.
pub fn optimizer_step(opt: &mut AdamW, store: &mut ParamStore, config: &TrainConfig, step: usize, total: usize) -> Result<f64> {
    let lr = learning_rate_at(config, step, total);
    let norm = opt.step(store, lr, config)?;
    store.zero_grad();
    Ok(norm)
}

/// Batch mean of the example losses; accumulates the matching gradients
/// into `model.store`, reducing items in batch order.
pub fn total_loss(model: &mut Model, batch: &[&TrainingExample], config: &TrainConfig, seeds: &[u64]) -> Result<(f64, LossParts)> {
    let results: Vec<Result<(Gradients, LossParts, f64)>> = {
        let model_ref: &Model = model;
        batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(ex, &seed)| {
                let tape = if config.dropout > 0.0 { Tape::training(seed) } else { Tape::new() };
                let mut s = Session::new(&model_ref.store, tape);
                let (loss, parts) = model_ref.example_loss(&mut s, ex, &config.toggles)?;
                let value = s.tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss {value}")));
                }
                Ok((s.tape.backward(loss)?, parts, value))
            })
            .collect()
    };
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossParts::default();
    let mut total = 0.0;
    for r in results {
        let (grads, parts, value) = r?;
        model.store.accumulate(&grads, scale)?;
        mean.op += parts.op * scale;
        mean.scale += parts.scale * scale;
        mean.tree += parts.tree * scale;
        mean.tag += parts.tag * scale;
        total += value * scale;
    }
    Ok((total, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub loss_op: f64,
    pub loss_scale: f64,
    pub loss_tree: f64,
    pub loss_tag: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

fn item_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 32) ^ position as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains a fresh model on `train`. Dev metrics use greedy decoding on
/// `dev` (the training set when absent). Each epoch's metrics are written
/// to `log` as one JSON line.
pub fn train(
    train: &[HybridDocument],
    dev: Option<&[HybridDocument]>,
    model_config: ModelConfig,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model_config = model_config;
    model_config.encoder.dropout = config.dropout;
    let mut model = Model::new(model_config, config.seed)?;
    let examples = model.prepare_examples(train)?;
    if examples.is_empty() {
        return Err(Error::Data("training set has no questions".into()));
    }
    let dev = dev.unwrap_or(train);
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut opt = AdamW::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let predict = PredictOptions {
        mode: DecodeMode::Greedy,
        ..Default::default()
    };
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut loss_sum = 0.0;
        let mut norm = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|k| item_seed(config.seed, epoch, b * config.batch_size + k))
                .collect();
            let (loss, parts) = total_loss(&mut model, &batch, config, &seeds)?;
            let weight = batch.len() as f64 / examples.len() as f64;
            loss_sum += loss * weight;
            sums.op += parts.op * weight;
            sums.scale += parts.scale * weight;
            sums.tree += parts.tree * weight;
            sums.tag += parts.tag * weight;
            lr = learning_rate_at(config, step, total_steps);
            norm = optimizer_step(&mut opt, &mut model.store, config, step, total_steps)?;
            step += 1;
        }
        let (dev_em, dev_f1) = if epoch % config.eval_every == 0 || epoch == config.epochs {
            let preds = model.predict_dataset(dev, &predict)?;
            let report = evaluate_dataset(&preds, dev, Overrides::default(), &ScaleConvention::default())?;
            (Some(report.em), Some(report.f1))
        } else {
            (None, None)
        };
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum,
            loss_op: sums.op,
            loss_scale: sums.scale,
            loss_tree: sums.tree,
            loss_tag: sums.tag,
            learning_rate: lr,
            grad_norm: norm,
            dev_em,
            dev_f1,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&metrics).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        history.push(metrics);
        if let (Some(target), Some(em)) = (config.stop_at_em, dev_em) {
            if em >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_ramps_then_decays() {
        let c = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        assert_eq!(learning_rate_at(&c, 0, 100), 0.0);
        assert_eq!(learning_rate_at(&c, 5, 100), 0.5);
        assert_eq!(learning_rate_at(&c, 10, 100), 1.0);
        assert_eq!(learning_rate_at(&c, 55, 100), 0.5);
        assert_eq!(learning_rate_at(&c, 100, 100), 0.0);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0, -2.0]));
        let c = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store);
        optimizer_step(&mut opt, &mut store, &c, 5, 10).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
        // step 0 of warmup has learning rate 0
        store.get_mut(id).grad.data_mut().copy_from_slice(&[3.0, 4.0]);
        let c = TrainConfig::default();
        optimizer_step(&mut opt, &mut store, &c, 0, 10).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn clipping_and_non_finite_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![0.0, 0.0]));
        store.get_mut(id).grad.data_mut().copy_from_slice(&[30.0, 40.0]);
        let mut opt = AdamW::new(&store);
        let c = TrainConfig::default();
        let norm = opt.step(&mut store, 0.0, &c).unwrap();
        assert_eq!(norm, 50.0);
        assert!((store.grad_norm() - 5.0).abs() < 1e-12);
        store.get_mut(id).grad.data_mut()[0] = f64::NAN;
        assert!(opt.step(&mut store, 0.1, &c).is_err());
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![3.0, -2.0, 0.5]));
        let target = [1.0, 1.0, -1.0];
        let c = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store);
        for step in 0..200 {
            let w = store.value(id).data().to_vec();
            let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            store.get_mut(id).grad.data_mut().copy_from_slice(&g);
            optimizer_step(&mut opt, &mut store, &c, step, 200).unwrap();
        }
        for (a, b) in store.value(id).data().iter().zip(&target) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
