//! Forward operations recorded on the [`Graph`].

use crate::kernels;
use crate::ssm::scan::{selective_scan_fast_cached, Discretization, ScanInputs, ScanShape};
use crate::tensor::{numel, seq_dims, Tensor, TensorError, TensorResult};

use super::graph::{Bcast, Graph, Op, Var};

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

impl Graph {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Affine map over the last axis: `x[..., din] · w[din, dout] + bias[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> TensorResult<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().unwrap();
        let dout = match sw.as_slice() {
            [i, o] if *i == din => *o,
            _ => return Err(mismatch("linear", &sx, &sw)),
        };
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear(bias)", self.shape(b), &[dout]));
            }
        }
        let rows = numel(&sx) / din;
        let out = kernels::linear(self.data(x), rows, din, self.data(w), dout, bias.map(|b| self.data(b)));
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(tensor(shape, out), Op::Linear { x, w, bias, rows, din, dout }, rg))
    }

    /// Linear map over the channel-concatenation of `xs` with an
    /// order-independent reduction across blocks (see [`kernels::block_linear`]).
    ///
    /// Equal to `linear(concat(xs, last_axis), w, bias)` up to rounding.
    pub fn block_linear(&mut self, xs: &[Var], w: Var, bias: Option<Var>) -> TensorResult<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("block_linear", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let sw = self.shape(w).to_vec();
        let dout = match sw.as_slice() {
            [i, o] if *i == total => *o,
            _ => return Err(mismatch("block_linear", &[total], &sw)),
        };
        let rows = numel(lead);
        let slices: Vec<&[f64]> = xs.iter().map(|&x| self.data(x)).collect();
        let out = kernels::block_linear(&slices, &widths, rows, self.data(w), dout, bias.map(|b| self.data(b)));
        let mut shape = lead.to_vec();
        shape.push(dout);
        let mut deps = xs.to_vec();
        deps.push(w);
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(tensor(shape, out), Op::BlockLinear { xs: xs.to_vec(), widths, w, bias, rows, dout }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<(Tensor, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bcast, shape) = if ta.shape() == tb.shape() {
            (Bcast::None, ta.shape().to_vec())
        } else if ta.numel() == 1 {
            (Bcast::ScalarLeft, tb.shape().to_vec())
        } else if tb.numel() == 1 {
            (Bcast::ScalarRight, ta.shape().to_vec())
        } else {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        };
        let data = match bcast {
            Bcast::None => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::ScalarLeft => tb.data().iter().map(|&y| f(ta.data()[0], y)).collect(),
            Bcast::ScalarRight => ta.data().iter().map(|&x| f(x, tb.data()[0])).collect(),
        };
        Ok((tensor(shape, data), bcast))
    }

    /// Elementwise sum; shapes must be equal or one side a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (t, bcast) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b, bcast }, rg))
    }

    /// Elementwise product; shapes must be equal or one side a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (t, bcast) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b, bcast }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = tensor(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::silu, Op::Silu { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap();
        let out = tensor(t.shape().to_vec(), kernels::softmax_rows(t.data(), cols));
        let rg = self.requires_grad(x);
        self.push(out, Op::Softmax { x, cols }, rg)
    }

    /// Mean over time: `[L, C] -> [C]`, `[B, L, C] -> [B, C]`.
    pub fn mean_pool_time(&mut self, x: Var) -> TensorResult<Var> {
        let s = self.shape(x).to_vec();
        let (batch, len, ch) = seq_dims("mean_pool_time", &s)?;
        let out = kernels::mean_pool_time(self.data(x), batch, len, ch);
        let shape = if s.len() == 2 { vec![ch] } else { vec![batch, ch] };
        let rg = self.requires_grad(x);
        Ok(self.push(tensor(shape, out), Op::MeanPoolTime { x, batch, len, ch }, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> TensorResult<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Config { op: "concat", msg: format!("axis {axis} out of range for {first:?}") });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let chunks: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis] * inner).collect();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (&x, &c) in xs.iter().zip(&chunks) {
                out.extend_from_slice(&self.data(x)[o * c..(o + 1) * c]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(tensor(out_shape, out), Op::Concat { xs: xs.to_vec(), outer, chunks }, rg))
    }

    /// Takes `width` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, width: usize) -> TensorResult<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || width == 0 || start + width > s[axis] {
            return Err(TensorError::Config {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {s:?}", start + width),
            });
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let in_chunk = s[axis] * inner;
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * in_chunk + start * inner;
            out.extend_from_slice(&data[base..base + width * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let rg = self.requires_grad(x);
        Ok(self.push(
            tensor(shape, out),
            Op::Slice { x, outer, in_chunk, start: start * inner, width: width * inner },
            rg,
        ))
    }

    /// Elementwise sum of equally shaped tensors, independent of their order.
    pub fn sum_n(&mut self, xs: &[Var]) -> TensorResult<Var> {
        let shape = self.shape(xs[0]).to_vec();
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(mismatch("sum_n", &shape, self.shape(x)));
            }
        }
        let n = numel(&shape);
        let mut buf = vec![0.0; xs.len()];
        let out: Vec<f64> = (0..n)
            .map(|i| {
                for (slot, &x) in xs.iter().enumerate() {
                    buf[slot] = self.data(x)[i];
                }
                kernels::slot_sum(&mut buf)
            })
            .collect();
        let rg = self.rg(xs);
        Ok(self.push(tensor(shape, out), Op::SumN { xs: xs.to_vec() }, rg))
    }

    /// Zero-padded temporal convolution preserving length.
    ///
    /// `x: [L, Cin]` or `[B, L, Cin]`, `kernel: [w, Cin, Cout]` with odd `w`, `bias: [Cout]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> TensorResult<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, len, cin) = seq_dims("conv1d", &sx)?;
        let sk = self.shape(kernel).to_vec();
        let (width, cout) = match sk.as_slice() {
            [w, ci, co] if *ci == cin => (*w, *co),
            _ => return Err(mismatch("conv1d", &sx, &sk)),
        };
        if width % 2 == 0 {
            return Err(TensorError::Config { op: "conv1d", msg: format!("kernel width must be odd, got {width}") });
        }
        if self.shape(bias) != [cout] {
            return Err(mismatch("conv1d(bias)", self.shape(bias), &[cout]));
        }
        let out = kernels::conv1d_same(self.data(x), batch, len, cin, self.data(kernel), width, cout, self.data(bias));
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(tensor(shape, out), Op::Conv1d { x, k: kernel, bias, batch, len, cin, cout, width }, rg))
    }

    /// Causal depthwise convolution. `kernel: [w, C]`, `bias: [C]`.
    pub fn depthwise_causal_conv(&mut self, x: Var, kernel: Var, bias: Var) -> TensorResult<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, len, ch) = seq_dims("depthwise_causal_conv", &sx)?;
        let sk = self.shape(kernel).to_vec();
        let width = match sk.as_slice() {
            [w, c] if *c == ch => *w,
            _ => return Err(mismatch("depthwise_causal_conv", &sx, &sk)),
        };
        if self.shape(bias) != [ch] {
            return Err(mismatch("depthwise_causal_conv(bias)", self.shape(bias), &[ch]));
        }
        let out =
            kernels::depthwise_causal_conv(self.data(x), batch, len, ch, self.data(kernel), width, self.data(bias));
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(tensor(sx, out), Op::DepthwiseConv { x, k: kernel, bias, batch, len, ch, width }, rg))
    }

    /// Layer normalization over the last axis with `ε = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> TensorResult<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(mismatch("layer_norm", &sx, self.shape(gamma)));
        }
        let (y, mean, rstd) =
            kernels::layer_norm(self.data(x), cols, self.data(gamma), self.data(beta), LAYER_NORM_EPS);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(tensor(sx, y), Op::LayerNorm { x, gamma, beta, cols, mean, rstd }, rg))
    }

    /// Selective scan (see [`crate::ssm::scan`]).
    ///
    /// `u, delta: [B, L, Di]` (or `[L, Di]`), `a: [Di, N]`, `b, c: [B, L, N]`, `d: [Di]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        mode: Discretization,
    ) -> TensorResult<Var> {
        let su = self.shape(u).to_vec();
        let (batch, len, d_inner) = seq_dims("selective_scan", &su)?;
        let d_state = *self.shape(a).last().unwrap();
        let shape = ScanShape { batch, len, d_inner, d_state };
        let inputs = ScanInputs {
            u: self.data(u),
            delta: self.data(delta),
            a: self.data(a),
            b: self.data(b),
            c: self.data(c),
            d: self.data(d),
        };
        let (y, cache) = selective_scan_fast_cached(inputs, shape, mode)?;
        let rg = self.rg(&[u, delta, a, b, c, d]);
        Ok(self.push(tensor(su, y), Op::Scan { u, delta, a, b, c, d, shape, mode, cache }, rg))
    }

    /// Multiplies sample `i` of `x: [B, ...]` by the scalar `s[i]`.
    pub fn scale_per_sample(&mut self, x: Var, s: Var) -> TensorResult<Var> {
        let sx = self.shape(x).to_vec();
        let batch = sx[0];
        if self.value(s).numel() != batch {
            return Err(mismatch("scale_per_sample", &sx, self.shape(s)));
        }
        let per = numel(&sx) / batch;
        let sd = self.data(s);
        let out: Vec<f64> = self.data(x).iter().enumerate().map(|(i, &v)| v * sd[i / per]).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(tensor(sx, out), Op::ScalePerSample { x, s, per }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Mean binary cross-entropy of `logits` (one per label) against `labels ∈ {0, 1}`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> TensorResult<Var> {
        let z = self.data(logits);
        if z.len() != labels.len() {
            return Err(mismatch("bce_with_logits", self.shape(logits), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Contract(format!("labels must be 0 or 1, got {bad}")));
        }
        let loss = z.iter().zip(labels).map(|(&x, &y)| bce_term(x, y)).sum::<f64>() / labels.len() as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, labels: labels.to_vec() }, rg))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `max(x, 0) - x·y + ln(1 + e^{-|x|})`.
#[inline]
pub fn bce_term(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
