use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use caf_mamba::autodiff::BackwardFault;
use caf_mamba::bench::{scaling_report, summary, to_csv, BenchOptions, TransformerBaseline, TransformerConfig};
use caf_mamba::config::RunConfig;
use caf_mamba::data::{export_manifest, load_dataset, synth_generate, Dataset};
use caf_mamba::model::{
    checkpoint, group_errors, model_grad_check, CafMamba, InferenceModel, ModelConfig, LMVD_MODALITY_DIMS,
};
use caf_mamba::training::{evaluate, predict, split_dataset, train as fit};
use caf_mamba::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{BenchArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

const NUMERICAL: u8 = 3;

pub fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(if e.is_numerical() { NUMERICAL } else { 2 })
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    io(path, fs::write(path, contents))
}

/// Creates `<parent>/<unix seconds>-seed<seed>`, adding a suffix when taken.
fn run_dir(parent: &Path, seed: u64) -> Result<PathBuf> {
    io(parent, fs::create_dir_all(parent))?;
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = format!("{ts}-seed{seed}");
    for i in 0.. {
        let dir = parent.join(if i == 0 { base.clone() } else { format!("{base}-{i}") });
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(dir, e)),
        }
    }
    unreachable!()
}

pub fn synth(a: &SynthArgs) -> Result<ExitCode> {
    if a.out.is_dir() && io(&a.out, fs::read_dir(&a.out))?.next().is_some() && !a.force {
        return Err(Error::Config(format!("{} is not empty; pass --force to write into it", a.out.display())));
    }
    let ds = synth_generate(a.n, &a.dims, a.len, a.seed)?;
    io(&a.out, fs::create_dir_all(&a.out))?;
    let manifest = export_manifest(&ds, &a.out)?;
    let dims: Vec<String> = a.dims.iter().map(ToString::to_string).collect();
    println!("n {} dims {} len {} balance {:.3}", ds.len(), dims.join(","), a.len, ds.label_balance());
    println!("manifest {}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

fn read_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = io(p, fs::read_to_string(p))?;
        cfg.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
            other => other,
        })?;
    }
    apply_sets(&mut cfg, sets)?;
    Ok(cfg)
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = read_config(a.config.as_deref(), &a.sets)?;
    macro_rules! flag {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    flag!(lr, epochs, batch_size, factor, patience, d_model, seed);
    if a.no_cime {
        cfg.use_cime = false;
    }
    if a.no_aamfm {
        cfg.use_aamfm = false;
    }
    if let Some(m) = &a.modalities {
        cfg.modalities = Some(m.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the manifest, applies the modality subset and derives the model
/// configuration.
fn prepare(cfg: &RunConfig, manifest: &Path) -> Result<(Dataset, ModelConfig)> {
    let ds = load_dataset(manifest)?;
    let model_cfg = cfg.model_config(&ds.modality_dims)?;
    let ds = match &cfg.modalities {
        Some(keep) => ds.select_modalities(keep)?,
        None => ds,
    };
    Ok((ds, model_cfg))
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let cfg = train_config(a)?;
    let (ds, model_cfg) = prepare(&cfg, &a.manifest)?;
    let (train_set, val_set, test_set) = split_dataset(&ds, cfg.split, cfg.seed)?;
    let mut model = CafMamba::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    let dir = run_dir(&a.runs_dir, cfg.seed)?;
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    log::info!(
        "run {}: {} train / {} val / {} test samples, {} parameters",
        dir.display(),
        train_set.len(),
        val_set.len(),
        test_set.len(),
        model.param_count()
    );
    let log_path = dir.join("train.jsonl");
    let mut log = BufWriter::new(io(&log_path, fs::File::create(&log_path))?);
    let outcome = fit(&mut model, &train_set, &val_set, &cfg.train_config(), Some(&mut log))?;
    io(&log_path, log.flush())?;

    let meta = |epoch: usize| {
        json!({
            "run_config": cfg.to_text(),
            "manifest": a.manifest.display().to_string(),
            "epoch": epoch,
            "best_val_f1": outcome.best_val_f1,
        })
    };
    if let Some(reason) = &outcome.diverged {
        let last_good = dir.join("last_good.ckpt");
        checkpoint::save(&last_good, &model, &meta(0))?;
        if outcome.best_epoch > 0 {
            let best = CafMamba { params: outcome.best.clone(), ..model.clone() };
            checkpoint::save(&dir.join("best.ckpt"), &best, &meta(outcome.best_epoch))?;
        }
        println!("run directory {}", dir.display());
        return Err(Error::Numerical(format!("training diverged ({reason}); saved {}", last_good.display())));
    }
    checkpoint::save(&dir.join("best.ckpt"), &model, &meta(outcome.best_epoch))?;
    println!("best epoch {} val f1 {:.6}", outcome.best_epoch, outcome.best_val_f1);
    if !test_set.is_empty() {
        let ev = evaluate(&model, &test_set)?;
        let m = ev.metrics;
        write_file(
            &dir.join("test_metrics.json"),
            serde_json::to_string_pretty(&json!({"loss": ev.loss, "metrics": m})).expect("serializable"),
        )?;
        println!("test accuracy {:.6} precision {:.6} recall {:.6} f1 {:.6}", m.accuracy, m.precision, m.recall, m.f1);
    }
    println!("run directory {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let (model, meta) = checkpoint::load(&a.checkpoint)?;
    let stored = meta.get("run_config").and_then(|v| v.as_str()).map(RunConfig::parse).transpose()?.unwrap_or_default();
    if a.config.is_some() || !a.sets.is_empty() {
        let expected = read_config(a.config.as_deref(), &a.sets)?;
        let ds = load_dataset(&a.manifest)?;
        let want = expected.model_config(&ds.modality_dims)?;
        let diff = want.diff(&model.config);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match the given configuration; differing fields: {}",
                diff.join(", ")
            )));
        }
    }
    let (ds, data_cfg) = prepare(&stored, &a.manifest)?;
    if data_cfg.modality_dims != model.config.modality_dims {
        return Err(Error::Config(format!(
            "checkpoint does not match the data; differing fields: modality_dims ({:?} vs {:?})",
            model.config.modality_dims, data_cfg.modality_dims
        )));
    }
    let (train_set, val_set, test_set) = split_dataset(&ds, stored.split, stored.seed)?;
    let part = match a.split.as_str() {
        "train" => train_set,
        "val" => val_set,
        "test" => test_set,
        "all" => ds,
        other => return Err(Error::Config(format!("unknown split '{other}' (expected train, val, test or all)"))),
    };
    if part.is_empty() {
        return Err(Error::Data(format!("split '{}' is empty", a.split)));
    }
    let ev = evaluate(&model, &part)?;
    if let Some(path) = &a.dump_predictions {
        let mut s = String::from("id,label,logit,prediction\n");
        for ((sample, z), p) in part.samples.iter().zip(&ev.logits).zip(predict(&ev.logits)) {
            s.push_str(&format!("{},{},{z},{p}\n", sample.id, sample.label));
        }
        write_file(path, s)?;
    }
    let m = ev.metrics;
    if a.json {
        let out = json!({"split": a.split, "n": part.len(), "loss": ev.loss, "metrics": m});
        println!("{out}");
    } else {
        println!("split {} n {} loss {:.6}", a.split, part.len(), ev.loss);
        println!("accuracy {:.6} precision {:.6} recall {:.6} f1 {:.6}", m.accuracy, m.precision, m.recall, m.f1);
        println!("tp {} fp {} tn {} fn {}", m.tp, m.fp, m.tn, m.fn_);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let fault = a.corrupt.as_deref().map(str::parse::<BackwardFault>).transpose().map_err(Error::Config)?;
    let cfg = ModelConfig { d_state: a.d_state, ..ModelConfig::new(a.dims.clone(), a.d_model) };
    let report = model_grad_check(&cfg, a.batch, a.len, a.seed, fault)?;
    let mut worst = 0.0f64;
    for (group, err) in group_errors(&report) {
        println!("{group:<8} max relative error {err:.3e}");
        worst = worst.max(err);
    }
    let pass = worst < GRAD_TOLERANCE;
    println!("{} tensors, max relative error {worst:.3e}: {}", report.len(), if pass { "PASS" } else { "FAIL" });
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(NUMERICAL) })
}

pub fn bench(a: &BenchArgs) -> Result<ExitCode> {
    let mut opts = BenchOptions { repeats: a.repeats, warmup: a.warmup, seed: a.seed, ..BenchOptions::default() };
    if let Some(l) = &a.lengths {
        opts.lengths = l.clone();
    }
    if opts.repeats == 0 || opts.lengths.is_empty() || opts.lengths.contains(&0) {
        return Err(Error::Config("need at least one repeat and positive lengths".into()));
    }
    opts.budget = a.budget_secs.map(Duration::from_secs_f64);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let caf = CafMamba::new(ModelConfig::new(LMVD_MODALITY_DIMS.to_vec(), a.d_model), &mut rng)?;
    let fast = InferenceModel::<f32>::new(&caf);
    let tr = TransformerBaseline::<f32>::new(TransformerConfig::baseline(LMVD_MODALITY_DIMS.iter().sum()), &mut rng);
    let (cr, trr) = scaling_report(&fast, caf.param_count(), &tr, &opts);
    let dir = run_dir(&a.runs_dir, a.seed)?;
    let csv = dir.join("bench.csv");
    write_file(&csv, to_csv(&[&cr, &trr]))?;
    print!("{}", summary(&cr, &trr));
    println!("csv {}", csv.display());
    Ok(ExitCode::SUCCESS)
}
