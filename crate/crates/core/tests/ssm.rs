use std::time::Instant;

use caf_mamba::autodiff::{grad_check_store, Graph, ParamStore};
use caf_mamba::ssm::{
    selective_scan_fast, selective_scan_ref, Discretization, MambaBlockParams, MambaConfig, ResMambaBlock,
    ResMambaWeights, ScanInputs, ScanShape,
};
use caf_mamba::{Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    s: ScanShape,
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl Instance {
    fn random(seed: u64, batch: usize, len: usize, d_inner: usize, d_state: usize) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<_>>();
        let seq = batch * len * d_inner;
        let bc = batch * len * d_state;
        Self {
            s: ScanShape { batch, len, d_inner, d_state },
            u: v(seq, -1.0, 1.0),
            delta: v(seq, 0.001, 0.5),
            a: v(d_inner * d_state, -3.0, -0.05),
            b: v(bc, -1.0, 1.0),
            c: v(bc, -1.0, 1.0),
            d: v(d_inner, -1.0, 1.0),
        }
    }

    fn inputs(&self) -> ScanInputs<'_, f64> {
        ScanInputs { u: &self.u, delta: &self.delta, a: &self.a, b: &self.b, c: &self.c, d: &self.d }
    }
}

/// Independently written double loop over (channel, state) with explicit exponentials.
fn naive_oracle(x: &Instance) -> Vec<f64> {
    let ScanShape { batch, len, d_inner, d_state } = x.s;
    let mut y = vec![0.0; batch * len * d_inner];
    for bi in 0..batch {
        for d in 0..d_inner {
            for n in 0..d_state {
                let mut h = 0.0;
                for t in 0..len {
                    let row = bi * len + t;
                    let dt = x.delta[row * d_inner + d];
                    let u = x.u[row * d_inner + d];
                    h = (dt * x.a[d * d_state + n]).exp() * h + dt * x.b[row * d_state + n] * u;
                    y[row * d_inner + d] += x.c[row * d_state + n] * h;
                }
            }
            for t in 0..len {
                let i = (bi * len + t) * d_inner + d;
                y[i] += x.d[d] * x.u[i];
            }
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_state_matrix_gives_cumulative_sum() {
    let u = [0.5, -1.0, 2.0, 0.25, 3.0];
    let s = ScanShape { batch: 1, len: 5, d_inner: 1, d_state: 1 };
    let ones = [1.0; 5];
    let x = ScanInputs { u: &u, delta: &ones, a: &[0.0], b: &ones, c: &ones, d: &[0.0] };
    let y = selective_scan_ref(x, s, Discretization::Euler).unwrap();
    assert_eq!(y, vec![0.5, -0.5, 1.5, 1.75, 4.75]);
}

#[test]
fn single_step_closed_form() {
    let x = Instance::random(1, 1, 1, 3, 4);
    let y = selective_scan_ref(x.inputs(), x.s, Discretization::Euler).unwrap();
    for d in 0..3 {
        let bbar_dot_c: f64 = (0..4).map(|n| x.c[n] * x.delta[d] * x.b[n]).sum();
        let want = bbar_dot_c * x.u[d] + x.d[d] * x.u[d];
        assert!((y[d] - want).abs() < 1e-14);
    }
}

#[test]
fn reference_matches_naive_oracle() {
    for seed in 0..5 {
        let x = Instance::random(seed, 2, 16, 3, 4);
        let y = selective_scan_ref(x.inputs(), x.s, Discretization::Euler).unwrap();
        assert!(max_diff(&y, &naive_oracle(&x)) < 1e-12);
    }
}

#[test]
fn fast_matches_reference_on_fifty_instances() {
    let lens = [1usize, 2, 3, 17, 64, 1000];
    for i in 0..50u64 {
        let len = lens[i as usize % lens.len()];
        let mode = if i % 2 == 0 { Discretization::Euler } else { Discretization::Zoh };
        let x = Instance::random(100 + i, 1 + (i as usize % 2), len, 3, 4);
        let r = selective_scan_ref(x.inputs(), x.s, mode).unwrap();
        let f = selective_scan_fast(x.inputs(), x.s, mode).unwrap();
        assert!(max_diff(&r, &f) < 1e-9, "instance {i} (L={len})");
        if len == 1 {
            assert_eq!(r, f);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fast_matches_reference_on_prime_lengths(
        len in prop::sample::select(vec![5usize, 7, 13, 61, 67, 127, 131, 257]),
        seed in 0u64..10_000,
    ) {
        let x = Instance::random(seed, 2, len, 2, 3);
        let r = selective_scan_ref(x.inputs(), x.s, Discretization::Euler).unwrap();
        let f = selective_scan_fast(x.inputs(), x.s, Discretization::Euler).unwrap();
        prop_assert!(max_diff(&r, &f) < 1e-9);
    }

    #[test]
    fn scan_is_causal(len in 2usize..40, t in 0usize..40, seed in 0u64..10_000) {
        let t = t % len;
        let x = Instance::random(seed, 1, len, 2, 3);
        let y0 = selective_scan_fast(x.inputs(), x.s, Discretization::Euler).unwrap();
        let mut x2 = x;
        x2.u[t * 2] += 1.0;
        x2.b[t * 3 + 1] -= 0.5;
        let y1 = selective_scan_fast(x2.inputs(), x2.s, Discretization::Euler).unwrap();
        prop_assert_eq!(&y0[..t * 2], &y1[..t * 2]);
    }
}

#[test]
fn state_stays_bounded_over_ten_thousand_steps() {
    let len = 10_000;
    let mut x = Instance::random(7, 1, len, 4, 8);
    // unit-norm input per step
    for row in x.u.chunks_mut(4) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let y = selective_scan_fast(x.inputs(), x.s, Discretization::Euler).unwrap();
    assert!(y.iter().all(|v| v.is_finite()));
    // |h| <= max_t |B̄ u| / (1 - max Ā) in the worst case; use a loose cap
    let worst = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e3, "{worst}");
}

#[test]
fn length_mismatch_and_empty_sequence_errors() {
    let x = Instance::random(3, 1, 4, 2, 2);
    let short = ScanInputs { b: &x.b[..6], ..x.inputs() };
    assert!(matches!(selective_scan_ref(short, x.s, Discretization::Euler), Err(TensorError::Config { .. })));
    let s = ScanShape { len: 0, ..x.s };
    let e = ScanInputs { u: &[], delta: &[], b: &[], c: &[], ..x.inputs() };
    assert!(matches!(selective_scan_fast(e, s, Discretization::Euler), Err(TensorError::EmptySequence { .. })));
}

#[test]
fn fast_scan_in_f32_tracks_f64() {
    let x = Instance::random(9, 2, 300, 4, 8);
    let c = |v: &[f64]| v.iter().map(|&e| e as f32).collect::<Vec<f32>>();
    let (u, dl, a, b, cc, d) = (c(&x.u), c(&x.delta), c(&x.a), c(&x.b), c(&x.c), c(&x.d));
    let x32 = ScanInputs { u: &u, delta: &dl, a: &a, b: &b, c: &cc, d: &d };
    let y32 = selective_scan_fast(x32, x.s, Discretization::Euler).unwrap();
    let y64 = selective_scan_fast(x.inputs(), x.s, Discretization::Euler).unwrap();
    let worst = y32.iter().zip(&y64).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

fn best_of<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn fast_scan_latency_grows_roughly_linearly() {
    let small = Instance::random(11, 1, 1000, 16, 16);
    let large = Instance::random(12, 1, 10_000, 16, 16);
    let t_small = best_of(7, || {
        selective_scan_fast(small.inputs(), small.s, Discretization::Euler).unwrap();
    });
    let t_large = best_of(3, || {
        selective_scan_fast(large.inputs(), large.s, Discretization::Euler).unwrap();
    });
    assert!(t_large > t_small);
    assert!(t_large / t_small < 15.0, "ratio {}", t_large / t_small);
}

fn small_cfg(d_model: usize) -> MambaConfig {
    MambaConfig { d_state: 4, ..MambaConfig::new(d_model) }
}

fn rand_x(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn block_with_zero_output_projection_is_zero_map() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let blk = MambaBlockParams::new(&mut store, "m", small_cfg(8), &mut rng);
    blk.zero_out_proj(&mut store);
    for seed in 0..3 {
        let mut g = Graph::new();
        let x = g.constant(rand_x(&[2, 7, 8], seed));
        let y = blk.forward(&mut g, &store, x).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn block_preserves_shape_and_checks_width() {
    let mut store = ParamStore::new();
    let blk = MambaBlockParams::new(&mut store, "m", small_cfg(6), &mut ChaCha8Rng::seed_from_u64(2));
    for len in [1, 5, 333] {
        let mut g = Graph::new();
        let x = g.constant(rand_x(&[len, 6], len as u64));
        let y = blk.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[len, 6]);
        assert!(g.value(y).is_finite());
    }
    let mut g = Graph::new();
    let x = g.constant(rand_x(&[4, 5], 0));
    assert!(matches!(blk.forward(&mut g, &store, x), Err(TensorError::Config { .. })));
}

#[test]
fn block_gradients_match_finite_differences() {
    for mode in [Discretization::Euler, Discretization::Zoh] {
        let mut store = ParamStore::new();
        let cfg = MambaConfig { discretization: mode, ..small_cfg(8) };
        let blk = MambaBlockParams::new(&mut store, "m", cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let x = rand_x(&[6, 8], 4);
        let w = rand_x(&[6, 8], 5);
        let report = grad_check_store(
            &store,
            |g, s| {
                let xv = g.constant(x.clone());
                let y = blk.forward(g, s, xv)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok::<_, caf_mamba::TensorError>(g.sum(p))
            },
            1e-5,
            None,
        )
        .unwrap();
        assert_eq!(report.len(), 11);
        for r in report {
            assert!(r.max_rel_err < 1e-4, "{mode:?} {}: {}", r.name, r.max_rel_err);
        }
    }
}

#[test]
fn res_mamba_identity_at_zero_init_and_decomposition() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let res = ResMambaBlock::new(&mut store, "r", small_cfg(8), &mut rng);

    let x = rand_x(&[2, 9, 8], 7);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = res.forward(&mut g, &store, xv).unwrap();
    let gamma = g.param(&store, res.norm_gamma);
    let beta = g.param(&store, res.norm_beta);
    let n = g.layer_norm(xv, gamma, beta).unwrap();
    let inner = res.inner.forward(&mut g, &store, n).unwrap();
    for ((yv, xv), iv) in g.data(y).iter().zip(x.data()).zip(g.data(inner)) {
        assert!((yv - xv - iv).abs() < 1e-12);
    }

    res.inner.zero_out_proj(&mut store);
    for seed in 0..10 {
        let x = rand_x(&[2, 5, 8], 100 + seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = res.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.data(y), x.data());
    }
}

#[test]
fn res_mamba_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let res = ResMambaBlock::new(&mut store, "r", small_cfg(8), &mut ChaCha8Rng::seed_from_u64(8));
    // move the norm away from its trivial init
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for v in store.get_mut(res.norm_gamma).data_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let x = rand_x(&[2, 6, 8], 10);
    let w = rand_x(&[2, 6, 8], 11);
    let report = grad_check_store(
        &store,
        |g, s| {
            let xv = g.leaf(x.clone().with_requires_grad());
            let y = res.forward(g, s, xv)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok::<_, caf_mamba::TensorError>(g.sum(p))
        },
        1e-5,
        None,
    )
    .unwrap();
    for r in report {
        assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn inference_weights_match_the_tape() {
    let mut store = ParamStore::new();
    let res = ResMambaBlock::new(&mut store, "r", MambaConfig::new(16), &mut ChaCha8Rng::seed_from_u64(12));
    let x = rand_x(&[3, 70, 16], 13);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = res.forward(&mut g, &store, xv).unwrap();

    let w64 = ResMambaWeights::<f64>::from_store(&res, &store);
    let y64 = w64.forward(x.data(), 3, 70).unwrap();
    assert!(max_diff(&y64, g.data(y)) < 1e-12);

    let w32 = ResMambaWeights::<f32>::from_store(&res, &store);
    let x32: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
    let y32 = w32.forward(&x32, 3, 70).unwrap();
    let worst = y32.iter().zip(g.data(y)).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}
