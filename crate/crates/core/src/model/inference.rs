//! Tape-free forward pass in `f32` or `f64`.

use crate::error::{Error, Result};
use crate::kernels::{self, Real};
use crate::ssm::block::cast;
use crate::ssm::ResMambaWeights;

use super::caf::CafMamba;
use super::config::{AttentionNorm, ModelConfig};

#[derive(Debug, Clone)]
struct UfeWeights<F> {
    dim: usize,
    proj_w: Vec<F>,
    proj_b: Vec<F>,
    blocks: Vec<ResMambaWeights<F>>,
}

/// Immutable copy of a model's weights for inference.
#[derive(Debug, Clone)]
pub struct InferenceModel<F> {
    config: ModelConfig,
    ufes: Vec<UfeWeights<F>>,
    cime: Vec<ResMambaWeights<F>>,
    mab_w: Option<Vec<F>>,
    fuse_w: Vec<F>,
    fuse_b: Vec<F>,
    mme: Vec<ResMambaWeights<F>>,
    head_w: Vec<F>,
    head_b: F,
}

/// Logits `[B]` and, with adaptive fusion, attention weights `[B, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F> {
    pub logits: Vec<F>,
    pub alpha: Option<Vec<F>>,
}

fn run_stack<F: Real>(blocks: &[ResMambaWeights<F>], mut x: Vec<F>, batch: usize, len: usize) -> Result<Vec<F>> {
    for b in blocks {
        x = b.forward(&x, batch, len)?;
    }
    Ok(x)
}

impl<F: Real> InferenceModel<F> {
    pub fn new(model: &CafMamba) -> Self {
        let (store, lay) = (&model.params, &model.layout);
        let blocks =
            |bs: &[crate::ssm::ResMambaBlock]| bs.iter().map(|b| ResMambaWeights::from_store(b, store)).collect();
        Self {
            config: model.config.clone(),
            ufes: lay
                .ufes
                .iter()
                .zip(&model.config.modality_dims)
                .map(|(u, &dim)| UfeWeights {
                    dim,
                    proj_w: cast(store.get(u.proj_w)),
                    proj_b: cast(store.get(u.proj_b)),
                    blocks: blocks(&u.blocks),
                })
                .collect(),
            cime: blocks(&lay.cime),
            mab_w: lay.mab_w.map(|id| cast(store.get(id))),
            fuse_w: cast(store.get(lay.fuse_w)),
            fuse_b: cast(store.get(lay.fuse_b)),
            mme: blocks(&lay.mme),
            head_w: cast(store.get(lay.head_w)),
            head_b: F::from_f64_lossy(store.get(lay.head_b).data()[0]),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `inputs[m]` is a `[batch, len, D_m]` buffer.
    pub fn forward(&self, inputs: &[&[F]], batch: usize, len: usize) -> Result<Prediction<F>> {
        let cfg = &self.config;
        if inputs.len() != cfg.n_modalities() {
            return Err(Error::Config(format!(
                "model expects {} modalities, got {}",
                cfg.n_modalities(),
                inputs.len()
            )));
        }
        if batch == 0 || len == 0 {
            return Err(Error::Data("empty batch or sequence".into()));
        }
        let d = cfg.d_model;
        let rows = batch * len;
        let mut streams = Vec::with_capacity(cfg.n_slots());
        for (m, (x, u)) in inputs.iter().zip(&self.ufes).enumerate() {
            if x.len() != rows * u.dim {
                return Err(Error::Data(format!(
                    "modality {m}: expected {} values for [{batch}, {len}, {}], got {}",
                    rows * u.dim,
                    u.dim,
                    x.len()
                )));
            }
            let h = kernels::conv1d_same(x, batch, len, u.dim, &u.proj_w, 1, d, &u.proj_b);
            streams.push(run_stack(&u.blocks, h, batch, len)?);
        }
        if cfg.use_cime {
            let mut summed = vec![F::zero(); rows * d];
            let mut buf = vec![F::zero(); streams.len()];
            for (i, o) in summed.iter_mut().enumerate() {
                for (slot, s) in streams.iter().enumerate() {
                    buf[slot] = s[i];
                }
                *o = kernels::slot_sum(&mut buf);
            }
            streams.push(run_stack(&self.cime, summed, batch, len)?);
        }
        let k = streams.len();
        let widths = vec![d; k];
        let (fused, alpha) = match &self.mab_w {
            Some(w) => {
                let pooled: Vec<Vec<F>> = streams.iter().map(|s| kernels::mean_pool_time(s, batch, len, d)).collect();
                let views: Vec<&[F]> = pooled.iter().map(Vec::as_slice).collect();
                let logits = kernels::block_linear(&views, &widths, batch, w, k, None);
                let alpha = match cfg.attention {
                    AttentionNorm::Softmax => kernels::softmax_rows(&logits, k),
                    AttentionNorm::SigmoidRenorm => {
                        let log_sig: Vec<F> = logits.iter().map(|&v| -kernels::softplus(-v)).collect();
                        kernels::softmax_rows(&log_sig, k)
                    }
                };
                let scaled: Vec<Vec<F>> = streams
                    .iter()
                    .enumerate()
                    .map(|(slot, s)| {
                        let per = len * d;
                        s.iter().enumerate().map(|(i, &v)| v * alpha[(i / per) * k + slot]).collect()
                    })
                    .collect();
                let views: Vec<&[F]> = scaled.iter().map(Vec::as_slice).collect();
                let x = kernels::block_linear(&views, &widths, rows, &self.fuse_w, d, Some(&self.fuse_b));
                (run_stack(&self.mme, x, batch, len)?, Some(alpha))
            }
            None => {
                let uniform = F::one() / F::from_usize(k).unwrap();
                let scaled: Vec<Vec<F>> = streams.iter().map(|s| s.iter().map(|&v| uniform * v).collect()).collect();
                let views: Vec<&[F]> = scaled.iter().map(Vec::as_slice).collect();
                (kernels::block_linear(&views, &widths, rows, &self.fuse_w, d, Some(&self.fuse_b)), None)
            }
        };
        let pooled = kernels::mean_pool_time(&fused, batch, len, d);
        let logits = kernels::linear(&pooled, batch, d, &self.head_w, 1, Some(&[self.head_b]));
        Ok(Prediction { logits, alpha })
    }
}
