//! Slice-level numeric kernels shared by the autodiff tape (`f64`) and the
//! tape-free inference path (`f32` or `f64`).
//!
//! All buffers are row-major. Sequence buffers are `[batch, len, channels]`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating point element type usable by the kernels.
pub trait Real: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    /// `c = a·b (+ c if accumulate)` with explicit element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index reachable through
                // the given strides for row-major or transposed row-major views.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `c[m,n] (+)= op(a) · op(b)` where `op` optionally transposes a row-major buffer.
///
/// With `trans_a`, `a` is stored as `[k, m]`; with `trans_b`, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    F::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
}

/// Order-independent sum of a handful of values: the values are sorted
/// before summation, so any permutation of the inputs yields the same bits.
#[inline]
pub fn slot_sum<F: Real>(vals: &mut [F]) -> F {
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals.iter().fold(F::zero(), |acc, &v| acc + v)
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

/// `ln(1 + e^x)` evaluated as `max(x, 0) + ln(1 + e^-|x|)`.
#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// `out[rows, out] = x[rows, in] · w[in, out] + bias`.
pub fn linear<F: Real>(x: &[F], rows: usize, din: usize, w: &[F], dout: usize, bias: Option<&[F]>) -> Vec<F> {
    let mut out = vec![F::zero(); rows * dout];
    if let Some(b) = bias {
        for r in out.chunks_exact_mut(dout) {
            r.copy_from_slice(b);
        }
    }
    gemm(rows, din, dout, x, false, w, false, &mut out, bias.is_some());
    out
}

/// Linear map over the channel-concatenation of several blocks,
/// `[x_1 ‖ … ‖ x_K] · w + bias`, without materializing the concatenation.
///
/// The K per-block partial products are combined with [`slot_sum`], so
/// permuting the blocks together with the matching row-blocks of `w`
/// reproduces the output bit for bit.
pub fn block_linear<F: Real>(
    xs: &[&[F]],
    widths: &[usize],
    rows: usize,
    w: &[F],
    dout: usize,
    bias: Option<&[F]>,
) -> Vec<F> {
    let mut partials: Vec<Vec<F>> = Vec::with_capacity(xs.len());
    let mut offset = 0;
    for (x, &d) in xs.iter().zip(widths) {
        let mut p = vec![F::zero(); rows * dout];
        gemm(rows, d, dout, x, false, &w[offset * dout..(offset + d) * dout], false, &mut p, false);
        partials.push(p);
        offset += d;
    }
    let k = xs.len();
    let mut out = vec![F::zero(); rows * dout];
    let mut buf = vec![F::zero(); k];
    for (i, o) in out.iter_mut().enumerate() {
        for (slot, p) in partials.iter().enumerate() {
            buf[slot] = p[i];
        }
        *o = slot_sum(&mut buf);
    }
    if let Some(b) = bias {
        for r in out.chunks_exact_mut(dout) {
            r.iter_mut().zip(b).for_each(|(o, &bb)| *o = *o + bb);
        }
    }
    out
}

/// Row-wise layer normalization. Returns `(y, mean, rstd)` per row.
pub fn layer_norm<F: Real>(x: &[F], cols: usize, gamma: &[F], beta: &[F], eps: F) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / cols;
    let n = F::from_usize(cols).unwrap();
    let mut y = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + eps).sqrt();
        for (j, (o, &v)) in yr.iter_mut().zip(xr).enumerate() {
            *o = (v - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Causal depthwise convolution: `y[t, c] = bias[c] + Σ_j k[j, c] · x[t - (w-1) + j, c]`
/// with zeros before the start of each sequence. `x` is `[batch, len, ch]`, `k` is `[w, ch]`.
pub fn depthwise_causal_conv<F: Real>(
    x: &[F],
    batch: usize,
    len: usize,
    ch: usize,
    k: &[F],
    width: usize,
    bias: &[F],
) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for b in 0..batch {
        let base = b * len * ch;
        for t in 0..len {
            let yr = &mut y[base + t * ch..base + (t + 1) * ch];
            yr.copy_from_slice(bias);
            for j in 0..width {
                let src = t as isize - (width - 1 - j) as isize;
                if src < 0 {
                    continue;
                }
                let xr = &x[base + src as usize * ch..base + (src as usize + 1) * ch];
                let kr = &k[j * ch..(j + 1) * ch];
                for c in 0..ch {
                    yr[c] = yr[c] + kr[c] * xr[c];
                }
            }
        }
    }
    y
}

/// Zero-padded "same" temporal convolution with an odd kernel `[w, cin, cout]`.
pub fn conv1d_same<F: Real>(
    x: &[F],
    batch: usize,
    len: usize,
    cin: usize,
    k: &[F],
    width: usize,
    cout: usize,
    bias: &[F],
) -> Vec<F> {
    let half = (width / 2) as isize;
    let mut y = vec![F::zero(); batch * len * cout];
    for r in y.chunks_exact_mut(cout) {
        r.copy_from_slice(bias);
    }
    for b in 0..batch {
        for j in 0..width {
            let shift = j as isize - half;
            // output rows t for which t + shift lies inside [0, len)
            let t0 = (-shift).max(0) as usize;
            let t1 = (len as isize - shift).min(len as isize);
            if t1 <= t0 as isize {
                continue;
            }
            let rows = t1 as usize - t0;
            let src0 = (t0 as isize + shift) as usize;
            let xs = &x[(b * len + src0) * cin..(b * len + src0 + rows) * cin];
            let ys = &mut y[(b * len + t0) * cout..(b * len + t0 + rows) * cout];
            gemm(rows, cin, cout, xs, false, &k[j * cin * cout..(j + 1) * cin * cout], false, ys, true);
        }
    }
    y
}

/// Softmax over the last axis. The normalizer uses [`slot_sum`].
pub fn softmax_rows<F: Real>(x: &[F], cols: usize) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    let mut buf = vec![F::zero(); cols];
    for (xr, yr) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - max).exp();
        }
        buf.copy_from_slice(yr);
        let z = slot_sum(&mut buf);
        yr.iter_mut().for_each(|o| *o = *o / z);
    }
    y
}

/// Mean over the time axis of `[batch, len, ch]`, giving `[batch, ch]`.
pub fn mean_pool_time<F: Real>(x: &[F], batch: usize, len: usize, ch: usize) -> Vec<F> {
    let inv = F::one() / F::from_usize(len).unwrap();
    let mut out = vec![F::zero(); batch * ch];
    for b in 0..batch {
        let o = &mut out[b * ch..(b + 1) * ch];
        for t in 0..len {
            let r = &x[(b * len + t) * ch..(b * len + t + 1) * ch];
            o.iter_mut().zip(r).for_each(|(a, &v)| *a = *a + v);
        }
        o.iter_mut().for_each(|a| *a = *a * inv);
    }
    out
}
