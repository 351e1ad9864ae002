//! Exit criteria, one PASS/FAIL line each. Runs as a plain binary so the
//! verdict lines are always printed; exits nonzero if any criterion fails.
//!
//! `cargo test -p caf-mamba-core --test acceptance -- 5 6` runs a subset.

use std::time::{Duration, Instant};

use caf_mamba::autodiff::Graph;
use caf_mamba::bench::{scaling_report, summary, BenchOptions, TransformerBaseline, TransformerConfig};
use caf_mamba::config::RunConfig;
use caf_mamba::data::{single_modality_probe, synth_generate};
use caf_mamba::model::{
    group_errors, model_grad_check, AttentionNorm, CafMamba, InferenceModel, ModelConfig, LMVD_MODALITY_DIMS,
};
use caf_mamba::ssm::{selective_scan_fast, selective_scan_ref, Discretization, ResMambaWeights, ScanInputs, ScanShape};
use caf_mamba::training::{compute_metrics, evaluate, split_dataset, train, TrainConfig};
use caf_mamba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SCAN_TOL: f64 = 1e-9;
const SCAN_BUDGET: Duration = Duration::from_secs(10);
const ALPHA_SUM_TOL: f64 = 1e-12;
const LEARN_MIN_ACC: f64 = 0.85;
const PROBE_MAX_ACC: f64 = 0.65;
const LEARN_BUDGET: Duration = Duration::from_secs(15 * 60);
const LEARN_EPOCHS: usize = 40;
const LEARN_SEEDS: u64 = 3;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_MIN_STRICT_WINS: usize = 4;
const MAX_GROWTH_RATIO: f64 = 6.0;
const MAX_LOGLOG_SLOPE: f64 = 1.3;
const BENCH_BUDGET: Duration = Duration::from_secs(10 * 60);
const METRIC_TOL: f64 = 1e-12;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig { d_state: 4, ..ModelConfig::new(vec![3, 4, 2], 8) };
    let report = model_grad_check(&cfg, 2, 6, 0, None).expect("gradient check runs");
    let elapsed = start.elapsed();
    let groups = group_errors(&report);
    let worst = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    let listing: Vec<String> = groups.iter().map(|(g, e)| format!("{g} {e:.1e}")).collect();
    verdict(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max relative error {worst:.2e} over {} tensors [{}], {:.1} s",
            report.len(),
            listing.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn scan_equivalence() -> Verdict {
    let start = Instant::now();
    let lens = [1usize, 2, 17, 1000, 5, 64, 33, 128];
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut r = rng(7_000 + i);
        let s = ScanShape {
            batch: r.random_range(1..3),
            len: lens[i as usize % lens.len()],
            d_inner: r.random_range(1..6),
            d_state: r.random_range(1..9),
        };
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>();
        let (seq, bc) = (s.batch * s.len * s.d_inner, s.batch * s.len * s.d_state);
        let (u, delta) = (v(seq, -1.0, 1.0), v(seq, 0.001, 1.0));
        let (a, b, c, d) =
            (v(s.d_inner * s.d_state, -4.0, -0.01), v(bc, -1.0, 1.0), v(bc, -1.0, 1.0), v(s.d_inner, -1.0, 1.0));
        let x = ScanInputs { u: &u, delta: &delta, a: &a, b: &b, c: &c, d: &d };
        let mode = if i % 2 == 0 { Discretization::Euler } else { Discretization::Zoh };
        let reference = selective_scan_ref(x, s, mode).expect("valid instance");
        let fast = selective_scan_fast(x, s, mode).expect("valid instance");
        worst = reference.iter().zip(&fast).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= SCAN_TOL && elapsed < SCAN_BUDGET,
        format!("50 instances, max |fast - reference| {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn residual_identity() -> Verdict {
    let cfg = ModelConfig { d_state: 4, blocks_per_stage: 2, ..ModelConfig::new(vec![3, 5, 2], 8) };
    let mut model = CafMamba::new(cfg.clone(), &mut rng(30)).unwrap();
    model.layout.zero_out_projections(&mut model.params);
    let blocks = model.layout.res_blocks();
    let mut failures = Vec::new();
    for seed in 0..10 {
        let x = Tensor::randn(&[2, 7, cfg.d_model], 1.5, &mut rng(300 + seed));
        for (i, (stage, block)) in blocks.iter().enumerate() {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, &model.params, xv).unwrap();
            let fast = ResMambaWeights::<f64>::from_store(block, &model.params).forward(x.data(), 2, 7).unwrap();
            if g.data(y) != x.data() || fast != x.data() {
                failures.push(format!("{stage} block {i} input {seed}"));
            }
        }
    }
    verdict(failures.is_empty(), format!("{} stages x 10 inputs, mismatches: {:?}", blocks.len(), failures))
}

fn alpha_of(model: &CafMamba, xs: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let out = model.forward(&mut g, xs).unwrap();
    (g.data(out.logits).to_vec(), g.data(out.alpha.expect("attention fusion")).to_vec())
}

fn inputs(cfg: &ModelConfig, batch: usize, len: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    cfg.modality_dims.iter().map(|&d| Tensor::randn(&[batch, len, d], 1.0, &mut r)).collect()
}

/// Copy of `model` for inputs reordered by `perm`, with every per-slot weight
/// moved along with its stream. The intermodal slot stays last.
fn permuted(model: &CafMamba, perm: &[usize]) -> CafMamba {
    let old = &model.config;
    let mut cfg = old.clone();
    cfg.modality_dims = perm.iter().map(|&p| old.modality_dims[p]).collect();
    let mut out = CafMamba::new(cfg.clone(), &mut rng(999)).unwrap();
    let (d, k) = (cfg.d_model, cfg.n_slots());
    let slot: Vec<usize> = (0..k).map(|i| if i < perm.len() { perm[i] } else { i }).collect();
    for (_, name, src) in model.params.iter() {
        let new_name = match name.strip_prefix("ufe") {
            Some(rest) => {
                let (idx, tail) = rest.split_once('.').unwrap();
                let new_m = perm.iter().position(|&p| p == idx.parse::<usize>().unwrap()).unwrap();
                format!("ufe{new_m}.{tail}")
            }
            None => name.to_string(),
        };
        let dst = out.params.get_mut(out.params.find(&new_name).unwrap()).data_mut();
        match name {
            "mab.w" => {
                for i in 0..k {
                    for r in 0..d {
                        for j in 0..k {
                            dst[(i * d + r) * k + j] = src.data()[(slot[i] * d + r) * k + slot[j]];
                        }
                    }
                }
            }
            "fuse.w" => {
                for (i, &s) in slot.iter().enumerate() {
                    dst[i * d * d..(i + 1) * d * d].copy_from_slice(&src.data()[s * d * d..(s + 1) * d * d]);
                }
            }
            _ => dst.copy_from_slice(src.data()),
        }
    }
    out
}

fn attention_contract() -> Verdict {
    let mut problems = Vec::new();
    let mut forwards = 0;
    for seed in 0..40u64 {
        let n = 2 + seed as usize % 3;
        let mut cfg = ModelConfig { d_state: 4, use_cime: seed % 4 != 3, ..ModelConfig::new(vec![3; n], 8) };
        cfg.modality_dims = (0..n).map(|m| 2 + (m + seed as usize) % 4).collect();
        if seed % 2 == 1 {
            cfg.attention = AttentionNorm::SigmoidRenorm;
        }
        let model = CafMamba::new(cfg.clone(), &mut rng(seed)).unwrap();
        let (_, alpha) = alpha_of(&model, &inputs(&cfg, 3, 1 + seed as usize % 9, seed + 50));
        forwards += 1;
        for row in alpha.chunks(cfg.n_slots()) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&a| a <= 0.0) || (sum - 1.0).abs() > ALPHA_SUM_TOL {
                problems.push(format!("seed {seed}: row {row:?}"));
            }
        }
    }
    for n in 2..=5 {
        let cfg = ModelConfig { d_state: 4, ..ModelConfig::new(vec![3; n], 8) };
        let mut model = CafMamba::new(cfg.clone(), &mut rng(60 + n as u64)).unwrap();
        let w = model.layout.mab_w.unwrap();
        model.params.get_mut(w).data_mut().fill(0.0);
        let (_, alpha) = alpha_of(&model, &inputs(&cfg, 2, 5, 70));
        let uniform = 1.0 / (n + 1) as f64;
        if alpha.iter().any(|&a| a != uniform) {
            problems.push(format!("W=0 with N={n}: {alpha:?}"));
        }
    }
    let mut perms_checked = 0;
    for (seed, cime) in [(80u64, true), (81, false)] {
        let cfg = ModelConfig { d_state: 4, use_cime: cime, ..ModelConfig::new(vec![3, 5, 2], 8) };
        let model = CafMamba::new(cfg.clone(), &mut rng(seed)).unwrap();
        let xs = inputs(&cfg, 2, 7, seed + 1);
        let (logits, alpha) = alpha_of(&model, &xs);
        let k = cfg.n_slots();
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let pm = permuted(&model, &perm);
            let pxs: Vec<Tensor> = perm.iter().map(|&p| xs[p].clone()).collect();
            let (pl, pa) = alpha_of(&pm, &pxs);
            perms_checked += 1;
            let moved = (0..2).all(|b| {
                (0..k).all(|i| pa[b * k + i].to_bits() == alpha[b * k + if i < 3 { perm[i] } else { i }].to_bits())
            });
            if pl.iter().zip(&logits).any(|(a, b)| a.to_bits() != b.to_bits()) || !moved {
                problems.push(format!("permutation {perm:?} (cime {cime}) not bit-exact"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!("{forwards} random forwards, W=0 for N=2..5, {perms_checked} permutations; problems: {problems:?}"),
    )
}

struct RunResult {
    test_acc: f64,
    best_epoch: usize,
    probe: [f64; 3],
    secs: f64,
}

fn run_synthetic(seed: u64, use_cime: bool, use_aamfm: bool) -> RunResult {
    let start = Instant::now();
    let ds = synth_generate(600, &[8, 8, 8], 16, seed).unwrap();
    let (tr, va, te) = split_dataset(&ds, [0.8, 0.1, 0.1], seed).unwrap();
    let cfg = ModelConfig { use_cime, use_aamfm, ..ModelConfig::new(vec![8, 8, 8], 64) };
    let mut model = CafMamba::new(cfg, &mut rng(seed)).unwrap();
    let tc = TrainConfig { epochs: LEARN_EPOCHS, seed, ..TrainConfig::default() };
    let out = train(&mut model, &tr, &va, &tc, None).unwrap();
    assert!(out.diverged.is_none(), "seed {seed}: {:?}", out.diverged);
    let test_acc = evaluate(&model, &te).unwrap().metrics.accuracy;
    let secs = start.elapsed().as_secs_f64();
    let probe = [0, 1, 2].map(|m| single_modality_probe(&tr, &te, m));
    RunResult { test_acc, best_epoch: out.best_epoch, probe, secs }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Default)]
struct FullRuns(Vec<RunResult>);

impl FullRuns {
    /// Trains the full model for seeds `0..n` not yet run.
    fn ensure(&mut self, n: u64) -> &[RunResult] {
        while (self.0.len() as u64) < n {
            let s = self.0.len() as u64;
            let r = run_synthetic(s, true, true);
            println!(
                "  full model seed {s}: test accuracy {:.4} (best epoch {}, {:.0} s)",
                r.test_acc, r.best_epoch, r.secs
            );
            self.0.push(r);
        }
        &self.0[..n as usize]
    }
}

fn synthetic_learnability(full: &mut FullRuns) -> Verdict {
    let runs = full.ensure(LEARN_SEEDS);
    let acc = mean(runs.iter().map(|r| r.test_acc));
    let probe: Vec<f64> = (0..3).map(|m| mean(runs.iter().map(|r| r.probe[m]))).collect();
    let worst_probe = probe.iter().copied().fold(0.0, f64::max);
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    verdict(
        acc >= LEARN_MIN_ACC && worst_probe <= PROBE_MAX_ACC && secs < LEARN_BUDGET.as_secs_f64(),
        format!(
            "mean test accuracy {acc:.4} over {LEARN_SEEDS} seeds, per-modality probe {:.3}/{:.3}/{:.3}, {secs:.0} s",
            probe[0], probe[1], probe[2]
        ),
    )
}

fn ablation_direction(full: &mut FullRuns) -> Verdict {
    let mut rows = Vec::new();
    let mut strict = 0;
    let full = full.ensure(ABLATION_SEEDS);
    for seed in 0..ABLATION_SEEDS {
        let (f_acc, f_epoch) = (full[seed as usize].test_acc, full[seed as usize].best_epoch);
        let nc = run_synthetic(seed, false, true);
        let na = run_synthetic(seed, true, false);
        println!(
            "  seed {seed}: full {f_acc:.4} (best epoch {f_epoch}) | w/o cime {:.4} (best epoch {}) | w/o aamfm {:.4} (best epoch {})",
            nc.test_acc, nc.best_epoch, na.test_acc, na.best_epoch
        );
        if f_acc > nc.test_acc && f_acc > na.test_acc {
            strict += 1;
        }
        rows.push((f_acc, nc.test_acc, na.test_acc));
    }
    let (mf, mc, ma) = (mean(rows.iter().map(|r| r.0)), mean(rows.iter().map(|r| r.1)), mean(rows.iter().map(|r| r.2)));
    verdict(
        mf >= ma && mf >= mc && strict >= ABLATION_MIN_STRICT_WINS,
        format!(
            "mean test accuracy full {mf:.4}, w/o cime {mc:.4}, w/o aamfm {ma:.4}; full strictly best in {strict}/{ABLATION_SEEDS} seeds (need {ABLATION_MIN_STRICT_WINS})"
        ),
    )
}

fn scaling() -> Verdict {
    let start = Instant::now();
    let mut r = rng(0);
    let caf = CafMamba::new(ModelConfig::new(LMVD_MODALITY_DIMS.to_vec(), 128), &mut r).unwrap();
    let fast = InferenceModel::<f32>::new(&caf);
    let tr = TransformerBaseline::<f32>::new(TransformerConfig::baseline(LMVD_MODALITY_DIMS.iter().sum()), &mut r);
    let opts = BenchOptions { repeats: 1, ..BenchOptions::default() };
    let (c, t) = scaling_report(&fast, caf.param_count(), &tr, &opts);
    let elapsed = start.elapsed();
    for line in summary(&c, &t).lines() {
        println!("  {line}");
    }
    let (rc, rt, slope) = (c.growth_ratio(), t.growth_ratio(), c.loglog_slope());
    let pass = match (rc, rt, slope) {
        (Some(rc), Some(rt), Some(s)) => rc <= MAX_GROWTH_RATIO && rc < rt && s <= MAX_LOGLOG_SLOPE,
        _ => false,
    } && elapsed < BENCH_BUDGET;
    let f = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.3}"));
    verdict(
        pass,
        format!(
            "caf-mamba ratio {} (limit {MAX_GROWTH_RATIO}), transformer ratio {}, caf-mamba slope {} (limit {MAX_LOGLOG_SLOPE}), {:.0} s",
            f(rc),
            f(rt),
            f(slope),
            elapsed.as_secs_f64()
        ),
    )
}

const RECIPE: &str = "\
modality_dims = auto
modalities = all
d_model = 256
blocks_per_stage = 1
d_state = 16
expand = 2
d_conv = 4
discretization = euler
attention = softmax
use_cime = true
use_aamfm = true
loss = bce
lr = 0.0001
epochs = 80
batch_size = 16
factor = 0.6
patience = 5
min_lr = 0.000001
split = 0.8,0.1,0.1
seed = 0
";

fn recipe_fidelity() -> Verdict {
    let c = RunConfig::default();
    let t = c.train_config();
    let m = c.model_config(&LMVD_MODALITY_DIMS).unwrap();
    let pass = c.to_text() == RECIPE
        && (t.lr, t.factor, t.epochs, t.batch_size) == (0.0001, 0.6, 80, 16)
        && (m.d_model, m.blocks_per_stage) == (256, 1)
        && m == ModelConfig::default()
        && c.validate().is_ok();
    verdict(
        pass,
        format!(
            "lr {} factor {} epochs {} batch {} d_model {} blocks {}",
            t.lr, t.factor, t.epochs, t.batch_size, m.d_model, m.blocks_per_stage
        ),
    )
}

fn metric_correctness() -> Verdict {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for case in 0..20 {
        // include degenerate all-one and all-zero label vectors
        let n = r.random_range(1..150);
        let (py, yy) = (if case == 0 { 1.0 } else { 0.5 }, if case == 1 { 0.0 } else { 0.5 });
        let p: Vec<u8> = (0..n).map(|_| r.random_bool(py) as u8).collect();
        let y: Vec<u8> = (0..n).map(|_| r.random_bool(yy) as u8).collect();
        let mut cm = [[0u32; 2]; 2];
        for (&a, &b) in p.iter().zip(&y) {
            cm[a as usize][b as usize] += 1;
        }
        let (tp, fp, tn, fn_) = (cm[1][1] as f64, cm[1][0] as f64, cm[0][0] as f64, cm[0][1] as f64);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let m = compute_metrics(&p, &y).unwrap();
        if (m.tp, m.fp, m.tn, m.fn_) != (cm[1][1] as usize, cm[1][0] as usize, cm[0][0] as usize, cm[0][1] as usize) {
            worst = f64::INFINITY;
        }
        for (got, want) in
            [(m.accuracy, (tp + tn) / n as f64), (m.precision, precision), (m.recall, recall), (m.f1, f1)]
        {
            worst = worst.max((got - want).abs());
        }
    }
    verdict(worst <= METRIC_TOL, format!("20 cases, max deviation {worst:.1e}"))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filters.is_empty() || filters.iter().any(|f| f == &n.to_string());
    let mut full = FullRuns::default();
    type Check<'a> = Box<dyn FnOnce(&mut FullRuns) -> Verdict + 'a>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (8, "recipe fidelity", Box::new(|_| recipe_fidelity())),
        (9, "metric correctness", Box::new(|_| metric_correctness())),
        (3, "residual identity", Box::new(|_| residual_identity())),
        (4, "attention contract", Box::new(|_| attention_contract())),
        (2, "scan equivalence", Box::new(|_| scan_equivalence())),
        (1, "gradient correctness", Box::new(|_| gradient_check())),
        (5, "synthetic learnability", Box::new(synthetic_learnability)),
        (6, "ablation direction", Box::new(ablation_direction)),
        (7, "latency scaling", Box::new(|_| scaling())),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if !wanted(n) {
            continue;
        }
        let v = check(&mut full);
        println!("criterion {n} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
