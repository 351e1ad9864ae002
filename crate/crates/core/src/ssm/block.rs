//! Gated selective state-space block and its pre-norm residual wrapper.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var, LAYER_NORM_EPS};
use crate::kernels::{self, Real};
use crate::tensor::{seq_dims, Tensor, TensorError, TensorResult};

use super::scan::{selective_scan_fast, Discretization, ScanInputs, ScanShape};

/// Range of the initial step size `Δ = softplus(bias)`.
pub const DT_MIN: f64 = 0.001;
pub const DT_MAX: f64 = 0.1;

/// Hyperparameters of one selective state-space block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub discretization: Discretization,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, d_state: 16, expand: 2, d_conv: 4, discretization: Discretization::Euler }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the low-rank step-size projection.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    pub fn validate(&self) -> TensorResult<()> {
        let fields =
            [("d_model", self.d_model), ("d_state", self.d_state), ("expand", self.expand), ("d_conv", self.d_conv)];
        for (name, v) in fields {
            if v == 0 {
                return Err(TensorError::Config { op: "mamba_block", msg: format!("{name} must be positive") });
            }
        }
        Ok(())
    }
}

/// Inverse of `softplus` for positive arguments.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Parameter handles of one block inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockParams {
    pub cfg: MambaConfig,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out_proj: ParamId,
}

impl MambaBlockParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: MambaConfig, rng: &mut R) -> Self {
        let (dm, di, n, r, w) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank(), cfg.d_conv);
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        let in_proj = add("in_proj", Tensor::uniform(&[dm, 2 * di], inv(dm), rng));
        let conv_w = add("conv_w", Tensor::uniform(&[w, di], inv(w), rng));
        let conv_b = add("conv_b", Tensor::uniform(&[di], inv(w), rng));
        let dt_down = add("dt_down", Tensor::uniform(&[di, r], inv(di), rng));
        let dt_up = add("dt_up", Tensor::uniform(&[r, di], inv(r), rng));
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let dt_bias_vals = (0..di).map(|_| inverse_softplus(rng.random_range(lo..hi).exp())).collect();
        let dt_bias = add("dt_bias", Tensor::from_vec(dt_bias_vals));
        let w_b = add("w_b", Tensor::uniform(&[di, n], inv(di), rng));
        let w_c = add("w_c", Tensor::uniform(&[di, n], inv(di), rng));
        let a_log_vals = (0..di).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        let a_log = add("a_log", Tensor::new(vec![di, n], a_log_vals).expect("sized"));
        let d = add("d", Tensor::ones(&[di]));
        let out_proj = add("out_proj", Tensor::uniform(&[di, dm], inv(di), rng));
        Self { cfg, in_proj, conv_w, conv_b, dt_down, dt_up, dt_bias, w_b, w_c, a_log, d, out_proj }
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.in_proj,
            self.conv_w,
            self.conv_b,
            self.dt_down,
            self.dt_up,
            self.dt_bias,
            self.w_b,
            self.w_c,
            self.a_log,
            self.d,
            self.out_proj,
        ]
    }

    pub fn zero_out_proj(&self, store: &mut ParamStore) {
        store.get_mut(self.out_proj).data_mut().fill(0.0);
    }

    fn check_width(&self, op: &'static str, shape: &[usize]) -> TensorResult<()> {
        let (_, _, c) = seq_dims(op, shape)?;
        if c != self.cfg.d_model {
            return Err(TensorError::Config {
                op,
                msg: format!("input has {c} channels, block expects d_model = {}", self.cfg.d_model),
            });
        }
        Ok(())
    }

    /// `x: [B, L, d_model]` (or `[L, d_model]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TensorResult<Var> {
        self.check_width("mamba_block", g.shape(x))?;
        let di = self.cfg.d_inner();
        let p = |g: &mut Graph, id| g.param(store, id);
        let w_in = p(g, self.in_proj);
        let uz = g.linear(x, w_in, None)?;
        let axis = g.shape(uz).len() - 1;
        let u = g.slice(uz, axis, 0, di)?;
        let z = g.slice(uz, axis, di, di)?;

        let (cw, cb) = (p(g, self.conv_w), p(g, self.conv_b));
        let u = g.depthwise_causal_conv(u, cw, cb)?;
        let u = g.silu(u);

        let (down, up, dtb) = (p(g, self.dt_down), p(g, self.dt_up), p(g, self.dt_bias));
        let dt = g.linear(u, down, None)?;
        let dt = g.linear(dt, up, Some(dtb))?;
        let delta = g.softplus(dt);
        let (wb, wc) = (p(g, self.w_b), p(g, self.w_c));
        let bt = g.linear(u, wb, None)?;
        let ct = g.linear(u, wc, None)?;
        let a_log = p(g, self.a_log);
        let a = g.exp(a_log);
        let a = g.neg(a);
        let d = p(g, self.d);
        let y = g.selective_scan(u, delta, a, bt, ct, d, self.cfg.discretization)?;

        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let w_out = p(g, self.out_proj);
        g.linear(y, w_out, None)
    }
}

/// `x + block(layer_norm(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResMambaBlock {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub inner: MambaBlockParams,
}

impl ResMambaBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: MambaConfig, rng: &mut R) -> Self {
        let norm_gamma = store.add(format!("{prefix}.norm_gamma"), Tensor::ones(&[cfg.d_model]));
        let norm_beta = store.add(format!("{prefix}.norm_beta"), Tensor::zeros(&[cfg.d_model]));
        let inner = MambaBlockParams::new(store, prefix, cfg, rng);
        Self { norm_gamma, norm_beta, inner }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm_gamma, self.norm_beta];
        ids.extend(self.inner.ids());
        ids
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TensorResult<Var> {
        self.inner.check_width("res_mamba", g.shape(x))?;
        let gamma = g.param(store, self.norm_gamma);
        let beta = g.param(store, self.norm_beta);
        let h = g.layer_norm(x, gamma, beta)?;
        let h = self.inner.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Tape-free weights of a [`ResMambaBlock`] in precision `F`.
#[derive(Debug, Clone)]
pub struct ResMambaWeights<F> {
    cfg: MambaConfig,
    gamma: Vec<F>,
    beta: Vec<F>,
    in_proj: Vec<F>,
    conv_w: Vec<F>,
    conv_b: Vec<F>,
    dt_down: Vec<F>,
    dt_up: Vec<F>,
    dt_bias: Vec<F>,
    w_b: Vec<F>,
    w_c: Vec<F>,
    a: Vec<F>,
    d: Vec<F>,
    out_proj: Vec<F>,
}

pub(crate) fn cast<F: Real>(t: &Tensor) -> Vec<F> {
    t.data().iter().map(|&v| F::from_f64_lossy(v)).collect()
}

impl<F: Real> ResMambaWeights<F> {
    pub fn from_store(block: &ResMambaBlock, store: &ParamStore) -> Self {
        let m = &block.inner;
        let get = |id| cast::<F>(store.get(id));
        let a = store.get(m.a_log).data().iter().map(|&v| F::from_f64_lossy(-v.exp())).collect();
        Self {
            cfg: m.cfg,
            gamma: get(block.norm_gamma),
            beta: get(block.norm_beta),
            in_proj: get(m.in_proj),
            conv_w: get(m.conv_w),
            conv_b: get(m.conv_b),
            dt_down: get(m.dt_down),
            dt_up: get(m.dt_up),
            dt_bias: get(m.dt_bias),
            w_b: get(m.w_b),
            w_c: get(m.w_c),
            a,
            d: get(m.d),
            out_proj: get(m.out_proj),
        }
    }

    /// Residual block on `x: [batch, len, d_model]`.
    pub fn forward(&self, x: &[F], batch: usize, len: usize) -> TensorResult<Vec<F>> {
        let c = self.cfg;
        let (dm, di, n, r) = (c.d_model, c.d_inner(), c.d_state, c.dt_rank());
        let rows = batch * len;
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let (h, _, _) = kernels::layer_norm(x, dm, &self.gamma, &self.beta, eps);
        let uz = kernels::linear(&h, rows, dm, &self.in_proj, 2 * di, None);
        let mut u = Vec::with_capacity(rows * di);
        let mut gate = Vec::with_capacity(rows * di);
        for row in uz.chunks_exact(2 * di) {
            u.extend_from_slice(&row[..di]);
            gate.extend(row[di..].iter().map(|&v| kernels::silu(v)));
        }
        let mut u = kernels::depthwise_causal_conv(&u, batch, len, di, &self.conv_w, c.d_conv, &self.conv_b);
        u.iter_mut().for_each(|v| *v = kernels::silu(*v));
        let dt = kernels::linear(&u, rows, di, &self.dt_down, r, None);
        let mut delta = kernels::linear(&dt, rows, r, &self.dt_up, di, Some(&self.dt_bias));
        delta.iter_mut().for_each(|v| *v = kernels::softplus(*v));
        let bt = kernels::linear(&u, rows, di, &self.w_b, n, None);
        let ct = kernels::linear(&u, rows, di, &self.w_c, n, None);
        let shape = ScanShape { batch, len, d_inner: di, d_state: n };
        let inputs = ScanInputs { u: &u, delta: &delta, a: &self.a, b: &bt, c: &ct, d: &self.d };
        let mut y = selective_scan_fast(inputs, shape, c.discretization)?;
        y.iter_mut().zip(&gate).for_each(|(v, &s)| *v = *v * s);
        let out = kernels::linear(&y, rows, di, &self.out_proj, dm, None);
        Ok(x.iter().zip(out).map(|(&a, b)| a + b).collect())
    }
}
