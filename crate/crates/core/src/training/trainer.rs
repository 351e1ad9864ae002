use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{bce_term, Graph, ParamStore};
use crate::data::{Dataset, MultimodalSample};
use crate::error::{Error, Result};
use crate::model::{CafMamba, InferenceModel};
use crate::tensor::Tensor;

use super::metrics::{compute_metrics, predict, Metrics};
use super::optim::{Adam, ReduceLrOnPlateau};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, epochs: 80, batch_size: 16, factor: 0.6, patience: 5, min_lr: 1e-6, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("factor must lie in (0, 1), got {}", self.factor)));
        }
        if !(self.min_lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!("min_lr must lie in [0, lr], got {}", self.min_lr)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, split: &str, loss: f64, m: &Metrics, lr: f64) -> Self {
        Self {
            epoch,
            split: split.into(),
            loss,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            lr,
        }
    }
}

/// Loss, metrics and raw logits of a model on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Parameters with the highest validation F1 (first epoch wins ties).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Set when training stopped on a non-finite loss or gradient. The model
    /// then holds the parameters from the end of the last completed epoch
    /// (the initial parameters if the first epoch failed).
    pub diverged: Option<String>,
}

/// Stacks `samples` into per-modality `[B, L, D_m]` tensors, truncating every
/// sample to `len` steps.
pub fn batch_tensors(samples: &[&MultimodalSample], len: usize) -> Result<Vec<Tensor>> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    (0..first.streams.len())
        .map(|m| {
            let d = first.streams[m].shape()[1];
            let mut data = Vec::with_capacity(samples.len() * len * d);
            for s in samples {
                data.extend_from_slice(&s.streams[m].data()[..len * d]);
            }
            Ok(Tensor::new(vec![samples.len(), len, d], data)?)
        })
        .collect()
}

/// Splits a shuffled order into consecutive batches of at most `size`.
pub fn batch_order(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

const EVAL_BATCH: usize = 32;

/// Evaluates every sample at its full length. Samples of equal length are
/// batched together; rows of a batch are computed independently.
pub fn evaluate(model: &CafMamba, ds: &Dataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let inf = InferenceModel::<f64>::new(model);
    let mut by_len: Vec<usize> = (0..ds.len()).collect();
    by_len.sort_by_key(|&i| (ds.samples[i].len(), i));
    let mut logits = vec![0.0; ds.len()];
    for group in by_len.chunk_by(|&a, &b| ds.samples[a].len() == ds.samples[b].len()) {
        for chunk in group.chunks(EVAL_BATCH) {
            let samples: Vec<&MultimodalSample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let len = samples[0].len();
            let inputs = batch_tensors(&samples, len)?;
            let views: Vec<&[f64]> = inputs.iter().map(Tensor::data).collect();
            let pred = inf.forward(&views, chunk.len(), len)?;
            for (&i, &z) in chunk.iter().zip(&pred.logits) {
                logits[i] = z;
            }
        }
    }
    let labels = ds.labels();
    let loss = logits.iter().zip(&labels).map(|(&z, &y)| bce_term(z, f64::from(y))).sum::<f64>() / ds.len() as f64;
    let metrics = compute_metrics(&predict(&logits), &labels)?;
    Ok(Evaluation { loss, metrics, logits })
}

/// JSON header describing a run; written as the first log line.
pub fn log_header(model: &CafMamba, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "record": "header",
        "lr": cfg.lr,
        "factor": cfg.factor,
        "batch": cfg.batch_size,
        "epochs": cfg.epochs,
        "patience": cfg.patience,
        "min_lr": cfg.min_lr,
        "seed": cfg.seed,
        "loss": "bce_with_logits",
        "fusion": model.config.fusion_mode(),
        "params": model.param_count(),
        "model": model.config,
    })
}

fn write_line(log: &mut Option<&mut dyn Write>, value: &impl Serialize) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// One optimizer step on a batch. Returns the batch logits and mean loss.
fn train_step(model: &mut CafMamba, adam: &mut Adam, samples: &[&MultimodalSample]) -> Result<(Vec<f64>, f64)> {
    let len = samples.iter().map(|s| s.len()).min().expect("non-empty batch");
    let inputs = batch_tensors(samples, len)?;
    let labels: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &inputs)?;
    let loss = g.bce_with_logits(out.logits, &labels)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {value}")));
    }
    let logits = g.data(out.logits).to_vec();
    g.backward(loss)?;
    model.params.zero_grad();
    g.accumulate_param_grads(&mut model.params);
    adam.step(&mut model.params)?;
    Ok((logits, value))
}

/// Minibatch Adam with validation every epoch and plateau-driven learning
/// rate decay on validation F1. On return the model holds the best
/// parameters, unless training diverged.
///
/// `log` receives a header line and then one JSON record per split per epoch.
pub fn train(
    model: &mut CafMamba,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    write_line(&mut log, &log_header(model, cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut sched = ReduceLrOnPlateau::new(cfg.lr, cfg.factor, cfg.patience, cfg.min_lr);
    let mut records = Vec::new();
    let mut best = model.params.clone();
    let mut last_good = model.params.clone();
    let (mut best_epoch, mut best_val_f1) = (0, f64::NEG_INFINITY);
    let mut diverged = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        adam.lr = lr;
        let mut logits = Vec::with_capacity(train_set.len());
        let mut labels = Vec::with_capacity(train_set.len());
        let mut loss_sum = 0.0;
        for batch in batch_order(train_set.len(), cfg.batch_size, &mut rng) {
            let samples: Vec<&MultimodalSample> = batch.iter().map(|&i| &train_set.samples[i]).collect();
            match train_step(model, &mut adam, &samples) {
                Ok((z, loss)) => {
                    loss_sum += loss * samples.len() as f64;
                    logits.extend(z);
                    labels.extend(samples.iter().map(|s| s.label));
                }
                Err(e) if e.is_numerical() => {
                    log::error!("epoch {epoch}: {e}; stopping with last good parameters");
                    diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_metrics = compute_metrics(&predict(&logits), &labels)?;
        let rec = EpochRecord::new(epoch, "train", loss_sum / labels.len() as f64, &train_metrics, lr);
        write_line(&mut log, &rec)?;
        records.push(rec);

        let val = evaluate(model, val_set)?;
        let rec = EpochRecord::new(epoch, "val", val.loss, &val.metrics, lr);
        write_line(&mut log, &rec)?;
        records.push(rec);
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3} f1 {:.3} | lr {lr:.2e}",
            records[records.len() - 2].loss,
            train_metrics.accuracy,
            val.loss,
            val.metrics.accuracy,
            val.metrics.f1
        );
        last_good.copy_values_from(&model.params);
        if val.metrics.f1 > best_val_f1 {
            best_val_f1 = val.metrics.f1;
            best_epoch = epoch;
            best.copy_values_from(&model.params);
        }
        sched.step(val.metrics.f1);
    }
    if diverged.is_some() {
        model.params.copy_values_from(&last_good);
    } else {
        model.params.copy_values_from(&best);
    }
    model.params.zero_grad();
    Ok(TrainOutcome { records, best, best_epoch, best_val_f1, diverged })
}
