//! Logistic-regression probe on time-averaged features of one modality.

use super::sample::{Dataset, MultimodalSample};

/// Per-channel mean over time of modality `m`.
pub fn mean_features(sample: &MultimodalSample, m: usize) -> Vec<f64> {
    let t = &sample.streams[m];
    let (len, d) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; d];
    for row in t.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= len as f64);
    out
}

/// Fitted linear classifier over standardized features.
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LogisticProbe {
    /// Full-batch gradient descent on the mean log loss.
    pub fn fit(x: &[Vec<f64>], y: &[u8], iters: usize, lr: f64) -> Self {
        let n = x.len() as f64;
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
        let mut probe = Self { mean, scale, w: vec![0.0; d], b: 0.0 };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..iters {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let p = sigmoid(probe.b + dot(&probe.w, row));
                let e = p - f64::from(label);
                gb += e / n;
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += e * v / n;
                }
            }
            probe.b -= lr * gb;
            for (w, g) in probe.w.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
        }
        probe
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.b + dot(&self.w, &self.standardize(row)) > 0.0)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[u8]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / x.len() as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains a probe on modality `m` of `train` and reports accuracy on `test`.
pub fn single_modality_probe(train: &Dataset, test: &Dataset, m: usize) -> f64 {
    let feats = |ds: &Dataset| -> (Vec<Vec<f64>>, Vec<u8>) {
        (ds.samples.iter().map(|s| mean_features(s, m)).collect(), ds.labels())
    };
    let (xtr, ytr) = feats(train);
    let (xte, yte) = feats(test);
    LogisticProbe::fit(&xtr, &ytr, 300, 0.5).accuracy(&xte, &yte)
}
