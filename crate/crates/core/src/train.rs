//! Deterministic AdamW training on the toy dataset.
//!
//! The optimizer is decoupled-decay AdamW with betas (0.9, 0.999),
//! epsilon 1e-8, and a uniform weight decay applied to every parameter.
//! The learning rate follows a cosine curve from its base value down
//! toward zero across the configured step budget. Batches are taken in a
//! fixed sequential order with no shuffling, so a training run is a pure
//! function of the model seed, the dataset spec, and the configuration,
//! and repeated runs match bit for bit.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::block::MixerOptions;
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::tensor::{Element, Tensor};

/// Training-run shape: step budget, base learning rate, decay, batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 500, lr: 1e-3, weight_decay: 0.05, batch_size: 64 }
    }
}

/// Cosine decay from `base` at step 0 toward zero at step `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Decoupled-decay AdamW. Moment buffers are kept in f64 keyed by
/// parameter name, so the update is independent of the model's element
/// type up to the final cast.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update with the given step learning rate. Every
    /// parameter must have a gradient of matching shape.
    pub fn step<E: Element>(
        &mut self,
        model: &mut Model<E>,
        grads: &BTreeMap<String, Tensor<E>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        let mut problem: Option<String> = None;
        model.visit_mut(&mut |name, tensor| {
            if problem.is_some() {
                return;
            }
            let Some(grad) = grads.get(name) else {
                problem = Some(format!("no gradient supplied for parameter {name:?}"));
                return;
            };
            if grad.shape() != tensor.shape() {
                problem = Some(format!(
                    "gradient for {name:?} has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    tensor.shape()
                ));
                return;
            }
            let numel = tensor.numel();
            let m = m_map.entry(name.to_string()).or_insert_with(|| vec![0.0; numel]);
            let v = v_map.entry(name.to_string()).or_insert_with(|| vec![0.0; numel]);
            let grad_data = grad.data();
            let data = tensor.data_mut();
            for i in 0..numel {
                let g = grad_data[i].to_f64();
                let mut p = data[i].to_f64();
                p -= lr * wd * p;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p -= lr * m_hat / (v_hat.sqrt() + eps);
                data[i] = E::from_f64(p);
            }
        });
        match problem {
            Some(detail) => Err(Error::invalid("adamw_step", detail)),
            None => Ok(()),
        }
    }
}

/// Index of the largest entry per row, first index on ties.
pub fn argmax_rows<E: Element>(logits: &Tensor<E>) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            "argmax_rows",
            format!("expected [N, K] logits, got {:?}", logits.shape()),
        ));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let data = logits.data();
    Ok((0..n)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if data[row * k + j].to_f64() > data[row * k + best].to_f64() {
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn fraction_correct<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let preds = argmax_rows(logits)?;
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "fraction_correct",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// One logged training step, written as line-delimited JSON.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub batch_accuracy: f64,
}

fn run_step<E: Element>(
    model: &mut Model<E>,
    opt: &mut AdamW,
    images: &Tensor<E>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone());
    let bound = model.bind(&mut g);
    let out = forward(&mut g, &bound, x, &MixerOptions::default())?;
    let loss_var = g.cross_entropy(out.logits, labels)?;
    let loss = g.value(loss_var).data()[0].to_f64();
    let accuracy = fraction_correct(g.value(out.logits), labels)?;
    let grads = g.backward(loss_var)?;
    let mut by_name = BTreeMap::new();
    for (name, var) in &bound.params {
        let shape = g.value(*var).shape().to_vec();
        by_name.insert(name.clone(), grads.get_or_zeros(*var, &shape));
    }
    opt.step(model, &by_name, lr)?;
    Ok((loss, accuracy))
}

/// Trains in place, emitting one JSON line per step to `log` when given.
/// A non-finite loss (or any non-finite intermediate) aborts with the
/// step at which training diverged.
pub fn train_toy<E: Element>(
    model: &mut Model<E>,
    data: &ToyDataset<E>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("train_toy", "batch_size must be at least 1"));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::invalid("train_toy", format!("lr must be finite and >= 0, got {}", cfg.lr)));
    }
    if data.is_empty() {
        return Err(Error::invalid("train_toy", "dataset is empty"));
    }
    let n = data.len();
    let batch = cfg.batch_size.min(n);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut cursor = 0usize;
    for step in 0..cfg.steps {
        if cursor + batch > n {
            cursor = 0;
        }
        let (images, labels) = data.batch(cursor, batch)?;
        cursor += batch;
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let (loss, batch_accuracy) = match run_step(model, &mut opt, &images, &labels, lr) {
            Ok(result) => result,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let record = StepRecord { step, lr, loss, batch_accuracy };
        if let Some(sink) = log.as_deref_mut() {
            writeln!(sink, "{}", serde_json::to_string(&record)?)?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Whole-dataset accuracy, evaluated in sequential batches.
pub fn evaluate_accuracy<E: Element>(
    model: &Model<E>,
    data: &ToyDataset<E>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate_accuracy", "dataset is empty"));
    }
    let n = data.len();
    let batch = batch_size.clamp(1, n);
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let count = batch.min(n - start);
        let (images, labels) = data.batch(start, count)?;
        let logits = model.forward_logits(&images)?;
        let preds = argmax_rows(&logits)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        start += count;
    }
    Ok(correct as f64 / n as f64)
}
