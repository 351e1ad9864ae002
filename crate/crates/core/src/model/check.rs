//! Finite-difference check of the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_store, BackwardFault, ParamCheck, Var};
use crate::error::Result;
use crate::tensor::Tensor;

use super::caf::CafMamba;
use super::config::ModelConfig;

/// Step used for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Checks every parameter of a freshly initialized model on random inputs
/// of shape `[batch, len, D_m]` with alternating labels.
///
/// Norm gains and offsets are jittered away from one and zero first so that
/// their gradients are not trivially symmetric.
pub fn model_grad_check(
    cfg: &ModelConfig,
    batch: usize,
    len: usize,
    seed: u64,
    fault: Option<BackwardFault>,
) -> Result<Vec<ParamCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CafMamba::new(cfg.clone(), &mut rng)?;
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.name(id).contains("norm") {
            for v in model.params.get_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let xs: Vec<Tensor> = cfg.modality_dims.iter().map(|&d| Tensor::randn(&[batch, len, d], 1.0, &mut rng)).collect();
    let labels: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
    grad_check_store(
        &model.params,
        |g, store| -> Result<Var> {
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = model.layout.forward(g, store, cfg, &vars)?;
            Ok(g.bce_with_logits(out.logits, &labels)?)
        },
        GRAD_CHECK_STEP,
        fault,
    )
}

/// Largest error per parameter group, where a group is the name up to the
/// first dot (`ufe0`, `cime`, `mab`, `fuse`, `mme`, `head`).
pub fn group_errors(report: &[ParamCheck]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for r in report {
        let group = r.name.split('.').next().unwrap_or(&r.name);
        match out.iter_mut().find(|(g, _)| g == group) {
            Some((_, e)) => *e = e.max(r.max_rel_err),
            None => out.push((group.to_string(), r.max_rel_err)),
        }
    }
    out
}
