//! Unimodal extractors, cross-modal interaction encoder, modality-wise
//! attention fusion and the classification head.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ssm::ResMambaBlock;
use crate::tensor::Tensor;

use super::config::{AttentionNorm, ModelConfig};

/// Pointwise projection into the shared width followed by a ResMamba stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Ufe {
    /// Width-1 convolution kernel `[1, D_m, d_model]`.
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub blocks: Vec<ResMambaBlock>,
}

/// Parameter handles of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct CafLayout {
    pub ufes: Vec<Ufe>,
    pub cime: Vec<ResMambaBlock>,
    /// Attention projection `[K·d_model, K]`, absent without adaptive fusion.
    pub mab_w: Option<ParamId>,
    /// Width-1 convolution over the channel concatenation, stored `[K·d_model, d_model]`.
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub mme: Vec<ResMambaBlock>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `[B]`
    pub logits: Var,
    /// `[B, K]`; `None` when fusion is plain concatenation.
    pub alpha: Option<Var>,
}

fn stack<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Vec<ResMambaBlock> {
    (0..cfg.blocks_per_stage)
        .map(|j| ResMambaBlock::new(store, &format!("{prefix}.block{j}"), cfg.mamba(), rng))
        .collect()
}

fn run_stack(g: &mut Graph, store: &ParamStore, blocks: &[ResMambaBlock], mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, store, x)?;
    }
    Ok(x)
}

impl CafLayout {
    /// Registers every parameter in `store` with the default initialization.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut ufes = Vec::with_capacity(cfg.n_modalities());
        for (m, &dm) in cfg.modality_dims.iter().enumerate() {
            let proj_w = store.add(format!("ufe{m}.proj_w"), Tensor::uniform(&[1, dm, d], inv(dm), rng));
            let proj_b = store.add(format!("ufe{m}.proj_b"), Tensor::uniform(&[d], inv(dm), rng));
            let blocks = stack(store, &format!("ufe{m}"), cfg, rng);
            ufes.push(Ufe { proj_w, proj_b, blocks });
        }
        let cime = if cfg.use_cime { stack(store, "cime", cfg, rng) } else { Vec::new() };
        let k = cfg.n_slots();
        let mab_w = cfg.use_aamfm.then(|| store.add("mab.w", Tensor::uniform(&[k * d, k], inv(k * d), rng)));
        let fuse_w = store.add("fuse.w", Tensor::uniform(&[k * d, d], inv(k * d), rng));
        let fuse_b = store.add("fuse.b", Tensor::uniform(&[d], inv(k * d), rng));
        let mme = if cfg.use_aamfm { stack(store, "mme", cfg, rng) } else { Vec::new() };
        let head_w = store.add("head.w", Tensor::uniform(&[d, 1], inv(d), rng));
        let head_b = store.add("head.b", Tensor::uniform(&[1], inv(d), rng));
        Ok(Self { ufes, cime, mab_w, fuse_w, fuse_b, mme, head_w, head_b })
    }

    /// Every ResMamba block in the network, by stage.
    pub fn res_blocks(&self) -> Vec<(&'static str, &ResMambaBlock)> {
        let mut out = Vec::new();
        for u in &self.ufes {
            out.extend(u.blocks.iter().map(|b| ("ufe", b)));
        }
        out.extend(self.cime.iter().map(|b| ("cime", b)));
        out.extend(self.mme.iter().map(|b| ("mme", b)));
        out
    }

    /// Sets every inner output projection to zero so each residual stage is
    /// the identity map.
    pub fn zero_out_projections(&self, store: &mut ParamStore) {
        for (_, b) in self.res_blocks() {
            b.inner.zero_out_proj(store);
        }
    }

    /// Projects modality `m` and runs its ResMamba stack. `x: [B, L, D_m]`.
    pub fn ufe_forward(&self, g: &mut Graph, store: &ParamStore, m: usize, x: Var) -> Result<Var> {
        let u = &self.ufes[m];
        let (w, b) = (g.param(store, u.proj_w), g.param(store, u.proj_b));
        let h = g.conv1d(x, w, b)?;
        run_stack(g, store, &u.blocks, h)
    }

    /// Sums the unimodal streams and runs the interaction stack.
    pub fn cime_forward(&self, g: &mut Graph, store: &ParamStore, streams: &[Var]) -> Result<Var> {
        let s = g.sum_n(streams)?;
        run_stack(g, store, &self.cime, s)
    }

    /// Pools each stream, projects to one logit per stream and normalizes
    /// into `alpha: [B, K]`, then fuses the alpha-weighted streams.
    pub fn mab_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        streams: &[Var],
    ) -> Result<(Var, Var)> {
        let w_id = self.mab_w.ok_or_else(|| Error::Config("attention fusion is disabled".into()))?;
        let pooled = streams.iter().map(|&s| g.mean_pool_time(s)).collect::<std::result::Result<Vec<_>, _>>()?;
        let w = g.param(store, w_id);
        let logits = g.block_linear(&pooled, w, None)?;
        let alpha = match cfg.attention {
            AttentionNorm::Softmax => g.softmax(logits),
            AttentionNorm::SigmoidRenorm => {
                // softmax(log σ(x)) = σ(x) / Σ σ(x)
                let neg = g.neg(logits);
                let sp = g.softplus(neg);
                let log_sig = g.neg(sp);
                g.softmax(log_sig)
            }
        };
        let mut scaled = Vec::with_capacity(streams.len());
        for (k, &s) in streams.iter().enumerate() {
            let a = g.slice(alpha, 1, k, 1)?;
            scaled.push(g.scale_per_sample(s, a)?);
        }
        let fused = self.fuse(g, store, &scaled)?;
        Ok((fused, alpha))
    }

    fn fuse(&self, g: &mut Graph, store: &ParamStore, streams: &[Var]) -> Result<Var> {
        let (w, b) = (g.param(store, self.fuse_w), g.param(store, self.fuse_b));
        Ok(g.block_linear(streams, w, Some(b))?)
    }

    /// Mean over time then the linear head: `[B, L, d] -> [B]`.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, m: Var) -> Result<Var> {
        let batch = g.shape(m)[0];
        let pooled = g.mean_pool_time(m)?;
        let (w, b) = (g.param(store, self.head_w), g.param(store, self.head_b));
        let z = g.linear(pooled, w, Some(b))?;
        Ok(g.reshape(z, &[batch])?)
    }

    /// Full network on one batch. `inputs[m]` is `[B, L, D_m]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, inputs: &[Var]) -> Result<ForwardOut> {
        check_inputs(cfg, inputs.iter().map(|&v| g.shape(v)))?;
        let mut streams = Vec::with_capacity(cfg.n_slots());
        for (m, &x) in inputs.iter().enumerate() {
            streams.push(self.ufe_forward(g, store, m, x)?);
        }
        if cfg.use_cime {
            let xi = self.cime_forward(g, store, &streams)?;
            streams.push(xi);
        }
        let (fused, alpha) = if cfg.use_aamfm {
            let (x, alpha) = self.mab_forward(g, store, cfg, &streams)?;
            (run_stack(g, store, &self.mme, x)?, Some(alpha))
        } else {
            let uniform = 1.0 / streams.len() as f64;
            let scaled: Vec<Var> = streams.iter().map(|&s| g.scale(s, uniform)).collect();
            (self.fuse(g, store, &scaled)?, None)
        };
        let logits = self.classify(g, store, fused)?;
        Ok(ForwardOut { logits, alpha })
    }
}

/// Validates modality count, per-modality width and shared `[B, L]`.
pub(crate) fn check_inputs<'a>(cfg: &ModelConfig, shapes: impl ExactSizeIterator<Item = &'a [usize]>) -> Result<()> {
    if shapes.len() != cfg.n_modalities() {
        return Err(Error::Config(format!("model expects {} modalities, got {}", cfg.n_modalities(), shapes.len())));
    }
    let mut lead: Option<&[usize]> = None;
    for (m, s) in shapes.enumerate() {
        let [b, l, c] = *s else {
            return Err(Error::Data(format!("modality {m}: expected [B, L, D], got {s:?}")));
        };
        if c != cfg.modality_dims[m] {
            return Err(Error::Data(format!("modality {m}: expected {} channels, got {c}", cfg.modality_dims[m])));
        }
        if l == 0 {
            return Err(Error::Data(format!("modality {m}: empty sequence")));
        }
        match lead {
            None => lead = Some(&s[..2]),
            Some(p) if p != [b, l] => {
                return Err(Error::Data(format!("modality {m}: batch/length {:?} differs from {p:?}", [b, l])));
            }
            _ => {}
        }
    }
    Ok(())
}

/// A configured network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CafMamba {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: CafLayout,
}

impl CafMamba {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = CafLayout::new(&config, &mut params, rng)?;
        Ok(Self { config, params, layout })
    }

    /// Number of scalar parameters; depends only on the configuration.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records a forward pass for `inputs[m]: [B, L, D_m]` on `g`.
    pub fn forward(&self, g: &mut Graph, inputs: &[Tensor]) -> Result<ForwardOut> {
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        self.layout.forward(g, &self.params, &self.config, &vars)
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Parameter count of the network described by `cfg`, in closed form.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let m = cfg.mamba();
    let (d, di, n, r) = (cfg.d_model, m.d_inner(), m.d_state, m.dt_rank());
    let block = 2 * d // norm
        + d * 2 * di // in_proj
        + (m.d_conv + 1) * di // conv
        + di * r + r * di + di // step size
        + 2 * di * n // B, C projections
        + di * n + di // A_log, D
        + di * d; // out_proj
    let k = cfg.n_slots();
    let stages = cfg.n_modalities() + usize::from(cfg.use_cime) + usize::from(cfg.use_aamfm);
    let ufe_proj: usize = cfg.modality_dims.iter().map(|&dm| dm * d + d).sum();
    let mab = if cfg.use_aamfm { k * d * k } else { 0 };
    Ok(ufe_proj + stages * cfg.blocks_per_stage * block + mab + k * d * d + d + d + 1)
}
