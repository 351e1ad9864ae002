use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One recording: a `[L, D_m]` feature matrix per modality and a binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub streams: Vec<Tensor>,
    pub label: u8,
}

impl MultimodalSample {
    /// Validates shapes, finiteness and the label.
    pub fn new(id: impl Into<String>, streams: Vec<Tensor>, label: u8) -> Result<Self> {
        let s = Self { id: id.into(), streams, label };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.streams[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.streams.iter().map(|t| t.shape()[1]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Data(format!("{}: label must be 0 or 1, got {}", self.id, self.label)));
        }
        let Some(first) = self.streams.first() else {
            return Err(Error::Data(format!("{}: no modalities", self.id)));
        };
        let len = first.shape()[0];
        for (m, t) in self.streams.iter().enumerate() {
            if t.ndim() != 2 {
                return Err(Error::Data(format!("{}: modality {m} is not a [L, D] matrix", self.id)));
            }
            if t.shape()[0] != len {
                return Err(Error::Data(format!(
                    "{}: modality {m} has {} steps, modality 0 has {len}",
                    self.id,
                    t.shape()[0]
                )));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("{}: modality {m} contains non-finite values", self.id)));
            }
        }
        Ok(())
    }

    /// Keeps only the modalities listed in `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            streams: keep.iter().map(|&m| self.streams[m].clone()).collect(),
            label: self.label,
        }
    }
}

/// A set of samples with common per-modality widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modality_dims: Vec<usize>,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn new(modality_dims: Vec<usize>, samples: Vec<MultimodalSample>) -> Result<Self> {
        for s in &samples {
            if s.dims() != modality_dims {
                return Err(Error::Data(format!(
                    "{}: modality dims {:?} differ from dataset dims {modality_dims:?}",
                    s.id,
                    s.dims()
                )));
            }
        }
        Ok(Self { modality_dims, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Fraction of positive labels.
    pub fn label_balance(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.label == 1).count() as f64 / self.samples.len() as f64
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            modality_dims: self.modality_dims.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Restricts every sample to the modalities in `keep`.
    pub fn select_modalities(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Config("modality subset is empty".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&m| m >= self.modality_dims.len()) {
            return Err(Error::Config(format!(
                "modality {bad} out of range (dataset has {})",
                self.modality_dims.len()
            )));
        }
        let mut seen = keep.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != keep.len() {
            return Err(Error::Config(format!("modality subset {keep:?} repeats an index")));
        }
        Ok(Self {
            modality_dims: keep.iter().map(|&m| self.modality_dims[m]).collect(),
            samples: self.samples.iter().map(|s| s.select(keep)).collect(),
        })
    }
}
