use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::InferenceModel;

use super::transformer::TransformerBaseline;

/// Mean and sample standard deviation of repeated wall-clock timings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repeats: usize,
}

/// Runs `f` `warmup` times untimed, then `repeats` times timed.
pub fn time_inference<T>(mut f: impl FnMut() -> T, warmup: usize, repeats: usize) -> Timing {
    assert!(repeats > 0, "at least one timed repeat");
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / repeats as f64;
    let var =
        if repeats > 1 { samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64 } else { 0.0 };
    Timing { mean_ms: mean, std_ms: var.sqrt(), repeats }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthTiming {
    pub len: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Latency of one model over increasing sequence lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub params: usize,
    pub repeats: usize,
    pub rows: Vec<LengthTiming>,
    /// Lengths that could not be timed, with the reason.
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn is_partial(&self) -> bool {
        !self.notes.is_empty()
    }

    fn at(&self, len: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.len == len).map(|r| r.mean_ms)
    }

    /// `T(longest) / T(shortest)` over the measured lengths.
    pub fn growth_ratio(&self) -> Option<f64> {
        let (first, last) = (self.rows.first()?, self.rows.last()?);
        (self.rows.len() > 1).then(|| last.mean_ms / first.mean_ms)
    }

    /// `T(b) / T(a)` when both lengths were measured.
    pub fn ratio_between(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.at(b)? / self.at(a)?)
    }

    /// Least-squares slope of `ln T` against `ln L`.
    pub fn loglog_slope(&self) -> Option<f64> {
        if self.rows.len() < 2 {
            return None;
        }
        let pts: Vec<(f64, f64)> = self.rows.iter().map(|r| ((r.len as f64).ln(), r.mean_ms.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }

    /// `max(T/L) / min(T/L)` over the measured lengths.
    pub fn per_token_spread(&self) -> Option<f64> {
        let per: Vec<f64> = self.rows.iter().map(|r| r.mean_ms / r.len as f64).collect();
        let max = per.iter().copied().fold(f64::NAN, f64::max);
        let min = per.iter().copied().fold(f64::NAN, f64::min);
        (!per.is_empty()).then(|| max / min)
    }
}

/// Sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    /// Lengths not yet started once a model has used this much time are skipped.
    pub budget: Option<Duration>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { lengths: (1..=10).map(|i| i * 1000).collect(), repeats: 100, warmup: 3, budget: None, seed: 0 }
    }
}

/// Times `run(len)` for every length in `opts`.
pub fn sweep(model: &str, params: usize, opts: &BenchOptions, mut run: impl FnMut(usize) -> Result<()>) -> BenchReport {
    let start = Instant::now();
    let mut report =
        BenchReport { model: model.into(), params, repeats: opts.repeats, rows: Vec::new(), notes: Vec::new() };
    for &len in &opts.lengths {
        if let Some(b) = opts.budget {
            if start.elapsed() > b {
                report.notes.push(format!("L={len}: skipped, time budget of {:.0} s used", b.as_secs_f64()));
                continue;
            }
        }
        if let Err(e) = run(len) {
            report.notes.push(format!("L={len}: {e}"));
            continue;
        }
        let t = time_inference(|| run(len), opts.warmup.saturating_sub(1), opts.repeats);
        log::info!("{model} L={len}: {:.2} ms ± {:.2}", t.mean_ms, t.std_ms);
        report.rows.push(LengthTiming { len, mean_ms: t.mean_ms, std_ms: t.std_ms });
    }
    report
}

fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Times the single-sequence forward pass of both models.
pub fn scaling_report(
    caf: &InferenceModel<f32>,
    caf_params: usize,
    transformer: &TransformerBaseline<f32>,
    opts: &BenchOptions,
) -> (BenchReport, BenchReport) {
    let dims = caf.config().modality_dims.clone();
    let max_len = opts.lengths.iter().copied().max().unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let streams: Vec<Vec<f32>> = dims.iter().map(|&d| random_input(&mut rng, max_len * d)).collect();
    let caf_report = sweep("caf-mamba", caf_params, opts, |len| {
        let views: Vec<&[f32]> = streams.iter().zip(&dims).map(|(s, &d)| &s[..len * d]).collect();
        caf.forward(&views, 1, len).map(|_| ())
    });
    let width = transformer.config.input_dim;
    let joined = random_input(&mut rng, max_len * width);
    let tr_report = sweep("transformer", transformer.param_count(), opts, |len| {
        std::hint::black_box(transformer.forward(&joined[..len * width], len));
        Ok(())
    });
    (caf_report, tr_report)
}

/// `model,params,L,mean_ms,std_ms` rows for every report.
pub fn to_csv(reports: &[&BenchReport]) -> String {
    let mut s = String::from("model,params,L,mean_ms,std_ms\n");
    for r in reports {
        for row in &r.rows {
            writeln!(s, "{},{},{},{:.4},{:.4}", r.model, r.params, row.len, row.mean_ms, row.std_ms).unwrap();
        }
    }
    s
}

/// Human-readable comparison of two sweeps.
pub fn summary(caf: &BenchReport, transformer: &BenchReport) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let mut s = String::new();
    for r in [caf, transformer] {
        writeln!(
            s,
            "{}: params {} growth ratio {} log-log slope {} per-token spread {}",
            r.model,
            r.params,
            fmt(r.growth_ratio()),
            fmt(r.loglog_slope()),
            fmt(r.per_token_spread())
        )
        .unwrap();
        for n in &r.notes {
            writeln!(s, "  partial: {n}").unwrap();
        }
    }
    let verdict = match (caf.growth_ratio(), transformer.growth_ratio()) {
        (Some(a), Some(b)) if a < b => "PASS",
        (Some(_), Some(_)) => "FAIL",
        _ => "INCOMPLETE",
    };
    writeln!(s, "growth ratio caf-mamba < transformer: {verdict}").unwrap();
    s
}
