//! Vector-Jacobian products for every recorded op.

use crate::kernels::{self, gemm};
use crate::ssm::scan::{scan_backward_impl, ScanInputs};

use super::graph::{accum, BackwardFault, Bcast, Graph, Op, Var};

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in g.chunks_exact(cols) {
        out.iter_mut().zip(r).for_each(|(o, &v)| *o += v);
    }
    out
}

fn map2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn backward_node(graph: &Graph, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &graph.nodes[i];
    let out = node.value.data();
    let rg = |v: Var| graph.requires_grad(v);
    let val = |v: Var| graph.data(v);
    let fault = graph.fault;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if rg(a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, val(b), true, &mut ga, false);
                accum(graph, grads, a, ga);
            }
            if rg(b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(a), true, g, false, &mut gb, false);
                if fault == Some(BackwardFault::MatMul) {
                    gb.iter_mut().for_each(|v| *v *= 0.5);
                }
                accum(graph, grads, b, gb);
            }
        }
        &Op::Linear { x, w, bias, rows, din, dout } => {
            if rg(x) {
                let mut gx = vec![0.0; rows * din];
                gemm(rows, dout, din, g, false, val(w), true, &mut gx, false);
                accum(graph, grads, x, gx);
            }
            if rg(w) {
                let mut gw = vec![0.0; din * dout];
                gemm(din, rows, dout, val(x), true, g, false, &mut gw, false);
                if fault == Some(BackwardFault::MatMul) {
                    gw.iter_mut().for_each(|v| *v *= 0.5);
                }
                accum(graph, grads, w, gw);
            }
            if let Some(b) = bias.filter(|&b| rg(b)) {
                accum(graph, grads, b, col_sums(g, dout));
            }
        }
        Op::BlockLinear { xs, widths, w, bias, rows, dout } => {
            let (w, rows, dout) = (*w, *rows, *dout);
            let wd = val(w);
            let mut gw = if rg(w) { Some(vec![0.0; wd.len()]) } else { None };
            let mut offset = 0;
            for (&x, &d) in xs.iter().zip(widths) {
                let wblock = &wd[offset * dout..(offset + d) * dout];
                if rg(x) {
                    let mut gx = vec![0.0; rows * d];
                    gemm(rows, dout, d, g, false, wblock, true, &mut gx, false);
                    accum(graph, grads, x, gx);
                }
                if let Some(gw) = gw.as_mut() {
                    let dst = &mut gw[offset * dout..(offset + d) * dout];
                    gemm(d, rows, dout, val(x), true, g, false, dst, false);
                }
                offset += d;
            }
            if let Some(gw) = gw {
                accum(graph, grads, w, gw);
            }
            if let Some(b) = bias.filter(|&b| rg(b)) {
                accum(graph, grads, b, col_sums(g, dout));
            }
        }
        &Op::Add { a, b, bcast } => {
            for (v, scalar) in [(a, bcast == Bcast::ScalarLeft), (b, bcast == Bcast::ScalarRight)] {
                if rg(v) {
                    let gv = if scalar { vec![g.iter().sum()] } else { g.to_vec() };
                    accum(graph, grads, v, gv);
                }
            }
        }
        &Op::Mul { a, b, bcast } => {
            let (da, db) = (val(a), val(b));
            let other = |o: &[f64], idx: usize| if o.len() == 1 { o[0] } else { o[idx] };
            if rg(a) {
                let full: Vec<f64> = g.iter().enumerate().map(|(j, &gv)| gv * other(db, j)).collect();
                let ga = if bcast == Bcast::ScalarLeft { vec![full.iter().sum()] } else { full };
                accum(graph, grads, a, ga);
            }
            if rg(b) {
                let full: Vec<f64> = g.iter().enumerate().map(|(j, &gv)| gv * other(da, j)).collect();
                let gb = if bcast == Bcast::ScalarRight { vec![full.iter().sum()] } else { full };
                accum(graph, grads, b, gb);
            }
        }
        &Op::Scale { x, c } => accum(graph, grads, x, g.iter().map(|v| v * c).collect()),
        &Op::Exp { x } => accum(graph, grads, x, map2(g, out, |gv, y| gv * y)),
        &Op::Sigmoid { x } => accum(graph, grads, x, map2(g, out, |gv, y| gv * y * (1.0 - y))),
        &Op::Silu { x } => {
            let gx = map2(g, val(x), |gv, xv| {
                let s = kernels::sigmoid(xv);
                gv * (s + xv * s * (1.0 - s))
            });
            accum(graph, grads, x, gx);
        }
        &Op::Softplus { x } => accum(graph, grads, x, map2(g, val(x), |gv, xv| gv * kernels::sigmoid(xv))),
        &Op::Softmax { x, cols } => {
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), or) in g.chunks_exact(cols).zip(out.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                let dot: f64 = if fault == Some(BackwardFault::Softmax) {
                    0.0
                } else {
                    gr.iter().zip(yr).map(|(a, b)| a * b).sum()
                };
                for j in 0..cols {
                    or[j] = yr[j] * (gr[j] - dot);
                }
            }
            accum(graph, grads, x, gx);
        }
        &Op::MeanPoolTime { x, batch, len, ch } => {
            let inv = 1.0 / len as f64;
            let mut gx = vec![0.0; batch * len * ch];
            for b in 0..batch {
                let gb = &g[b * ch..(b + 1) * ch];
                for t in 0..len {
                    let dst = &mut gx[(b * len + t) * ch..(b * len + t + 1) * ch];
                    dst.iter_mut().zip(gb).for_each(|(d, &v)| *d = v * inv);
                }
            }
            accum(graph, grads, x, gx);
        }
        Op::Concat { xs, outer, chunks } => {
            let total: usize = chunks.iter().sum();
            let mut start = 0;
            for (&x, &c) in xs.iter().zip(chunks) {
                if rg(x) {
                    let mut gx = Vec::with_capacity(outer * c);
                    for o in 0..*outer {
                        gx.extend_from_slice(&g[o * total + start..o * total + start + c]);
                    }
                    accum(graph, grads, x, gx);
                }
                start += c;
            }
        }
        &Op::Slice { x, outer, in_chunk, start, width } => {
            let mut gx = vec![0.0; outer * in_chunk];
            for o in 0..outer {
                gx[o * in_chunk + start..o * in_chunk + start + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            accum(graph, grads, x, gx);
        }
        Op::SumN { xs } => {
            for &x in xs {
                accum(graph, grads, x, g.to_vec());
            }
        }
        &Op::Conv1d { x, k, bias, batch, len, cin, cout, width } => {
            let half = (width / 2) as isize;
            let mut gx = rg(x).then(|| vec![0.0; batch * len * cin]);
            let mut gk = rg(k).then(|| vec![0.0; width * cin * cout]);
            let (xd, kd) = (val(x), val(k));
            for b in 0..batch {
                for j in 0..width {
                    let shift = j as isize - half;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = (len as isize - shift).min(len as isize);
                    if t1 <= t0 as isize {
                        continue;
                    }
                    let rows = t1 as usize - t0;
                    let src0 = (t0 as isize + shift) as usize;
                    let gy = &g[(b * len + t0) * cout..(b * len + t0 + rows) * cout];
                    let kj = &kd[j * cin * cout..(j + 1) * cin * cout];
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[(b * len + src0) * cin..(b * len + src0 + rows) * cin];
                        gemm(rows, cout, cin, gy, false, kj, true, dst, true);
                    }
                    if let Some(gk) = gk.as_mut() {
                        let xs = &xd[(b * len + src0) * cin..(b * len + src0 + rows) * cin];
                        gemm(cin, rows, cout, xs, true, gy, false, &mut gk[j * cin * cout..(j + 1) * cin * cout], true);
                    }
                }
            }
            if let Some(gx) = gx {
                accum(graph, grads, x, gx);
            }
            if let Some(gk) = gk {
                accum(graph, grads, k, gk);
            }
            if rg(bias) {
                accum(graph, grads, bias, col_sums(g, cout));
            }
        }
        &Op::DepthwiseConv { x, k, bias, batch, len, ch, width } => {
            let (xd, kd) = (val(x), val(k));
            let mut gx = vec![0.0; xd.len()];
            let mut gk = vec![0.0; kd.len()];
            for b in 0..batch {
                let base = b * len * ch;
                for t in 0..len {
                    let gy = &g[base + t * ch..base + (t + 1) * ch];
                    for j in 0..width {
                        let src = t as isize - (width - 1 - j) as isize;
                        if src < 0 {
                            continue;
                        }
                        let s = base + src as usize * ch;
                        for c in 0..ch {
                            gx[s + c] += gy[c] * kd[j * ch + c];
                            gk[j * ch + c] += gy[c] * xd[s + c];
                        }
                    }
                }
            }
            accum(graph, grads, x, gx);
            accum(graph, grads, k, gk);
            if rg(bias) {
                accum(graph, grads, bias, col_sums(g, ch));
            }
        }
        Op::LayerNorm { x, gamma, beta, cols, mean, rstd } => {
            let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
            let (xd, gd) = (val(x), val(gamma));
            let n = cols as f64;
            let mut gx = vec![0.0; xd.len()];
            let mut ggamma = vec![0.0; cols];
            let mut xhat = vec![0.0; cols];
            let mut gxhat = vec![0.0; cols];
            for (r, (xr, gr)) in xd.chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
                for j in 0..cols {
                    xhat[j] = (xr[j] - mean[r]) * rstd[r];
                    gxhat[j] = gr[j] * gd[j];
                    ggamma[j] += gr[j] * xhat[j];
                }
                let m1 = gxhat.iter().sum::<f64>() / n;
                let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                let dst = &mut gx[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    dst[j] = rstd[r] * (gxhat[j] - m1 - xhat[j] * m2);
                }
            }
            accum(graph, grads, x, gx);
            accum(graph, grads, gamma, ggamma);
            if rg(beta) {
                accum(graph, grads, beta, col_sums(g, cols));
            }
        }
        Op::Scan { u, delta, a, b, c, d, shape, mode, cache } => {
            let inputs = ScanInputs { u: val(*u), delta: val(*delta), a: val(*a), b: val(*b), c: val(*c), d: val(*d) };
            let carry = fault != Some(BackwardFault::Scan);
            let sg = scan_backward_impl(inputs, *shape, *mode, cache, g, carry);
            accum(graph, grads, *u, sg.u);
            accum(graph, grads, *delta, sg.delta);
            accum(graph, grads, *a, sg.a);
            accum(graph, grads, *b, sg.b);
            accum(graph, grads, *c, sg.c);
            accum(graph, grads, *d, sg.d);
        }
        &Op::ScalePerSample { x, s, per } => {
            let (xd, sd) = (val(x), val(s));
            if rg(x) {
                accum(graph, grads, x, g.iter().enumerate().map(|(j, &gv)| gv * sd[j / per]).collect());
            }
            if rg(s) {
                let gs = g
                    .chunks_exact(per)
                    .zip(xd.chunks_exact(per))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                accum(graph, grads, s, gs);
            }
        }
        &Op::Reshape { x } => accum(graph, grads, x, g.to_vec()),
        &Op::Sum { x } => accum(graph, grads, x, vec![g[0]; graph.value(x).numel()]),
        &Op::Mean { x } => {
            let n = graph.value(x).numel();
            accum(graph, grads, x, vec![g[0] / n as f64; n]);
        }
        Op::Bce { logits, labels } => {
            let n = labels.len() as f64;
            let gz = val(*logits).iter().zip(labels).map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / n).collect();
            accum(graph, grads, *logits, gz);
        }
    }
}
