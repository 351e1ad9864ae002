//! Central finite-difference gradient checking.

use crate::tensor::{Tensor, TensorError, TensorResult};

use super::graph::{BackwardFault, Graph, Var};
use super::params::ParamStore;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of `f` at `params` against central
/// differences with step `h` and returns the largest relative error.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar loss.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> TensorResult<f64>
where
    F: Fn(&mut Graph, &[Var]) -> TensorResult<Var>,
{
    grad_check_with_fault(f, params, h, None)
}

pub fn grad_check_with_fault<F>(f: F, params: &[Tensor], h: f64, fault: Option<BackwardFault>) -> TensorResult<f64>
where
    F: Fn(&mut Graph, &[Var]) -> TensorResult<Var>,
{
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone().with_requires_grad())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()])).collect();

    let eval = |ps: &[Tensor]| -> TensorResult<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            worst = worst.max(relative_error(a, (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Result of checking one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

/// Checks every parameter of `store` for a loss built by `f`.
///
/// Results are returned per parameter tensor in store order.
pub fn grad_check_store<F, E>(
    store: &ParamStore,
    f: F,
    h: f64,
    fault: Option<BackwardFault>,
) -> Result<Vec<ParamCheck>, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::with_fault(fault);
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    g.accumulate_param_grads(&mut grads);

    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = grads.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut worst = 0.0f64;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(relative_error(a, (fp - fm) / (2.0 * h)));
        }
        out.push(ParamCheck { name: store.name(id).to_string(), numel: n, max_rel_err: worst });
    }
    Ok(out)
}
