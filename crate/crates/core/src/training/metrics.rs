use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classification summary. Ratios with an empty denominator are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(Error::Data("metrics of an empty prediction set".into()));
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Ok(Self { accuracy: ratio(tp + tn, total), precision, recall, f1, tp, fp, tn, fn_ })
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Metrics of 0/1 predictions against 0/1 labels.
pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            _ => return Err(Error::Data(format!("entry {i}: prediction {p} / label {y} not in {{0, 1}}"))),
        }
    }
    Metrics::from_counts(tp, fp, tn, fn_)
}

/// Thresholds logits at 0, i.e. probability 0.5.
pub fn predict(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&z| u8::from(z > 0.0)).collect()
}
