//! Pre-norm transformer encoder with full softmax attention, used as the
//! quadratic-cost reference in latency scaling runs. Inference only.

use rand::Rng;

use crate::kernels::{self, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
}

impl TransformerConfig {
    /// About one million parameters for the 425-channel LMVD input.
    pub fn baseline(input_dim: usize) -> Self {
        Self { input_dim, d_model: 128, heads: 4, layers: 5, d_ff: 512 }
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.input_dim * d + d;
        let attn = 4 * (d * d + d);
        let ff = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let norms = 4 * d;
        embed + self.layers * (attn + ff + norms) + 2 * d + d + 1
    }
}

#[derive(Debug, Clone)]
struct Layer<F> {
    ln1: (Vec<F>, Vec<F>),
    wq: Vec<F>,
    bq: Vec<F>,
    wk: Vec<F>,
    bk: Vec<F>,
    wv: Vec<F>,
    bv: Vec<F>,
    wo: Vec<F>,
    bo: Vec<F>,
    ln2: (Vec<F>, Vec<F>),
    w1: Vec<F>,
    b1: Vec<F>,
    w2: Vec<F>,
    b2: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct TransformerBaseline<F> {
    pub config: TransformerConfig,
    embed_w: Vec<F>,
    embed_b: Vec<F>,
    layers: Vec<Layer<F>>,
    norm: (Vec<F>, Vec<F>),
    head_w: Vec<F>,
    head_b: F,
}

fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| F::from_f64_lossy(rng.random_range(-bound..bound))).collect()
}

fn norm_params<F: Real>(d: usize) -> (Vec<F>, Vec<F>) {
    (vec![F::one(); d], vec![F::zero(); d])
}

/// Rows of attention from `q_rows` queries to `len` keys are computed this
/// many at a time, bounding the score buffer to `ROW_BLOCK × len`.
const ROW_BLOCK: usize = 128;

/// Softmax over each row of `scores`, in place.
fn softmax_in_place<F: Real>(scores: &mut [F], cols: usize) {
    for row in scores.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = F::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Full attention matrix `softmax(q kᵀ / √dh)` of one head, `[len, len]`.
pub fn attention_weights<F: Real>(q: &[F], k: &[F], len: usize, dh: usize) -> Vec<F> {
    let mut s = vec![F::zero(); len * len];
    kernels::gemm(len, dh, len, q, false, k, true, &mut s, false);
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    s.iter_mut().for_each(|v| *v = *v * scale);
    softmax_in_place(&mut s, len);
    s
}

/// One attention head: `softmax(q kᵀ / √dh) v` for contiguous `[len, dh]` inputs.
pub fn attention_head<F: Real>(q: &[F], k: &[F], v: &[F], len: usize, dh: usize) -> Vec<F> {
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut out = vec![F::zero(); len * dh];
    let mut scores = vec![F::zero(); ROW_BLOCK.min(len) * len];
    for r0 in (0..len).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(len - r0);
        let s = &mut scores[..rows * len];
        kernels::gemm(rows, dh, len, &q[r0 * dh..(r0 + rows) * dh], false, k, true, s, false);
        s.iter_mut().for_each(|x| *x = *x * scale);
        softmax_in_place(s, len);
        kernels::gemm(rows, len, dh, s, false, v, false, &mut out[r0 * dh..(r0 + rows) * dh], false);
    }
    out
}

fn split_head<F: Real>(x: &[F], len: usize, d: usize, h: usize, dh: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(len * dh);
    for t in 0..len {
        out.extend_from_slice(&x[t * d + h * dh..t * d + (h + 1) * dh]);
    }
    out
}

impl<F: Real> TransformerBaseline<F> {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Self {
        assert!(config.d_model.is_multiple_of(config.heads), "d_model must be divisible by heads");
        let (d, ff) = (config.d_model, config.d_ff);
        let embed_w = uniform(rng, config.input_dim, config.input_dim * d);
        let embed_b = uniform(rng, config.input_dim, d);
        let layers = (0..config.layers)
            .map(|_| Layer {
                ln1: norm_params(d),
                wq: uniform(rng, d, d * d),
                bq: uniform(rng, d, d),
                wk: uniform(rng, d, d * d),
                bk: uniform(rng, d, d),
                wv: uniform(rng, d, d * d),
                bv: uniform(rng, d, d),
                wo: uniform(rng, d, d * d),
                bo: uniform(rng, d, d),
                ln2: norm_params(d),
                w1: uniform(rng, d, d * ff),
                b1: uniform(rng, d, ff),
                w2: uniform(rng, ff, ff * d),
                b2: uniform(rng, ff, d),
            })
            .collect();
        let head_w = uniform(rng, d, d);
        let head_b = uniform::<F, R>(rng, d, 1)[0];
        Self { config, embed_w, embed_b, layers, norm: norm_params(d), head_w, head_b }
    }

    /// Number of scalar parameters actually held.
    pub fn param_count(&self) -> usize {
        let l: usize = self
            .layers
            .iter()
            .map(|l| {
                [&l.ln1.0, &l.ln1.1, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo]
                    .iter()
                    .chain([&l.ln2.0, &l.ln2.1, &l.w1, &l.b1, &l.w2, &l.b2].iter())
                    .map(|v| v.len())
                    .sum::<usize>()
            })
            .sum();
        self.embed_w.len() + self.embed_b.len() + l + self.norm.0.len() + self.norm.1.len() + self.head_w.len() + 1
    }

    /// Logit for one sequence `x: [len, input_dim]`.
    pub fn forward(&self, x: &[F], len: usize) -> F {
        let TransformerConfig { input_dim, d_model: d, heads, d_ff, .. } = self.config;
        assert_eq!(x.len(), len * input_dim, "input must be [len, input_dim]");
        let dh = d / heads;
        let eps = F::from_f64_lossy(1e-5);
        let mut h = kernels::linear(x, len, input_dim, &self.embed_w, d, Some(&self.embed_b));
        for l in &self.layers {
            let (n, _, _) = kernels::layer_norm(&h, d, &l.ln1.0, &l.ln1.1, eps);
            let q = kernels::linear(&n, len, d, &l.wq, d, Some(&l.bq));
            let k = kernels::linear(&n, len, d, &l.wk, d, Some(&l.bk));
            let v = kernels::linear(&n, len, d, &l.wv, d, Some(&l.bv));
            let mut mixed = vec![F::zero(); len * d];
            for head in 0..heads {
                let o = attention_head(
                    &split_head(&q, len, d, head, dh),
                    &split_head(&k, len, d, head, dh),
                    &split_head(&v, len, d, head, dh),
                    len,
                    dh,
                );
                for t in 0..len {
                    mixed[t * d + head * dh..t * d + (head + 1) * dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
            }
            let a = kernels::linear(&mixed, len, d, &l.wo, d, Some(&l.bo));
            h.iter_mut().zip(&a).for_each(|(x, y)| *x = *x + *y);
            let (n, _, _) = kernels::layer_norm(&h, d, &l.ln2.0, &l.ln2.1, eps);
            let mut f = kernels::linear(&n, len, d, &l.w1, d_ff, Some(&l.b1));
            f.iter_mut().for_each(|v| *v = v.max(F::zero()));
            let f = kernels::linear(&f, len, d_ff, &l.w2, d, Some(&l.b2));
            h.iter_mut().zip(&f).for_each(|(x, y)| *x = *x + *y);
        }
        let (n, _, _) = kernels::layer_norm(&h, d, &self.norm.0, &self.norm.1, eps);
        let pooled = kernels::mean_pool_time(&n, 1, len, d);
        pooled.iter().zip(&self.head_w).fold(self.head_b, |acc, (&p, &w)| acc + p * w)
    }
}
