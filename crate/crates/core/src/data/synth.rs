//! Synthetic three-way conjunction task.
//!
//! The label is 1 exactly when the phase sign of modality 0 matches the offset
//! sign of modality 1 and modality 2 has high amplitude. Signs are uniform
//! and independent of the label, so neither of the first two modalities says
//! anything on its own; amplitude alone is only weakly informative.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::sample::{Dataset, MultimodalSample};

pub const NOISE_STD: f64 = 0.5;
pub const OFFSET: f64 = 0.8;
pub const AMP_HIGH: f64 = 1.2;
pub const AMP_LOW: f64 = 0.3;
/// Probability that a negative sample has mismatched signs with high amplitude.
/// The remainder is split evenly between the other two negative cells.
pub const P_NEG_MISMATCH_HIGH: f64 = 0.9;

/// Hidden factors of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthLatent {
    pub phase_positive: bool,
    pub offset_positive: bool,
    pub high_amplitude: bool,
    /// Phase of the amplitude carrier in units of 1/256 turn.
    pub carrier_phase: u8,
}

impl SynthLatent {
    pub fn label(&self) -> u8 {
        u8::from(self.phase_positive == self.offset_positive && self.high_amplitude)
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let label = rng.random_bool(0.5);
        let phase_positive = rng.random_bool(0.5);
        let (matched, high) = if label {
            (true, true)
        } else {
            let u: f64 = rng.random();
            let rest = (1.0 - P_NEG_MISMATCH_HIGH) / 2.0;
            if u < P_NEG_MISMATCH_HIGH {
                (false, true)
            } else if u < P_NEG_MISMATCH_HIGH + rest {
                (true, false)
            } else {
                (false, false)
            }
        };
        Self {
            phase_positive,
            offset_positive: if matched { phase_positive } else { !phase_positive },
            high_amplitude: high,
            carrier_phase: rng.random(),
        }
    }
}

fn sign(b: bool) -> f64 {
    if b {
        1.0
    } else {
        -1.0
    }
}

/// Noise-free value of modality `m` at step `t` (identical across channels).
pub fn clean_value(latent: &SynthLatent, m: usize, t: usize, len: usize) -> f64 {
    let x = t as f64 / len as f64;
    match m {
        0 => sign(latent.phase_positive) * (PI * x).sin(),
        1 => sign(latent.offset_positive) * OFFSET,
        2 => {
            let amp = if latent.high_amplitude { AMP_HIGH } else { AMP_LOW };
            let theta = 2.0 * PI * f64::from(latent.carrier_phase) / 256.0;
            amp * (0.5 + 0.5 * (2.0 * PI * 3.0 * x + theta).sin())
        }
        _ => 0.0,
    }
}

/// Builds the `[len, dims[m]]` streams for `latent`, adding Gaussian noise of
/// standard deviation `noise_std`.
pub fn render(latent: &SynthLatent, dims: &[usize], len: usize, noise_std: f64, rng: &mut impl Rng) -> Vec<Tensor> {
    let normal = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    dims.iter()
        .enumerate()
        .map(|(m, &d)| {
            let mut data = Vec::with_capacity(len * d);
            for t in 0..len {
                let base = clean_value(latent, m, t, len);
                for _ in 0..d {
                    let n = if noise_std > 0.0 { normal.sample(rng) } else { 0.0 };
                    data.push(base + n);
                }
            }
            Tensor::new(vec![len, d], data).expect("positive dims")
        })
        .collect()
}

/// Generates `n` samples with `dims.len()` modalities of length `len`.
/// Modalities beyond the third carry pure noise.
pub fn synth_generate(n: usize, dims: &[usize], len: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || len == 0 {
        return Err(Error::Config("synthetic generation needs n > 0 and L > 0".into()));
    }
    if dims.len() < 3 {
        return Err(Error::Config(format!("the planted rule spans three modalities, got {}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("modality dims must be positive, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let latent = SynthLatent::draw(&mut rng);
            let streams = render(&latent, dims, len, NOISE_STD, &mut rng);
            MultimodalSample::new(format!("s{i:05}"), streams, latent.label())
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dims.to_vec(), samples)
}

/// Recovers the rule from noisy streams with hand-set thresholds on channel
/// means. Used as a ceiling reference for learned models.
pub fn rule_decode(sample: &MultimodalSample) -> u8 {
    let len = sample.len();
    let weighted = |m: usize, w: &dyn Fn(usize) -> f64| -> f64 {
        let t = &sample.streams[m];
        let d = t.shape()[1];
        let mut acc = 0.0;
        for (i, row) in t.data().chunks(d).enumerate() {
            acc += w(i) * row.iter().sum::<f64>() / d as f64;
        }
        acc / len as f64
    };
    let phase = weighted(0, &|t| (PI * t as f64 / len as f64).sin());
    let offset = weighted(1, &|_| 1.0);
    let level = weighted(2, &|_| 1.0);
    let latent = SynthLatent {
        phase_positive: phase > 0.0,
        offset_positive: offset > 0.0,
        high_amplitude: level > 0.5 * (AMP_HIGH + AMP_LOW) * 0.5,
        carrier_phase: 0,
    };
    latent.label()
}
