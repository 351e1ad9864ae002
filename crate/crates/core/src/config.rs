//! Run configuration: `key = value` lines, `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AttentionNorm, ModelConfig};
use crate::ssm::Discretization;
use crate::training::TrainConfig;

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `None` takes the widths declared by the dataset.
    pub modality_dims: Option<Vec<usize>>,
    /// Modalities to keep, by index; `None` keeps all.
    pub modalities: Option<Vec<usize>>,
    pub d_model: usize,
    pub blocks_per_stage: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub discretization: Discretization,
    pub attention: AttentionNorm,
    pub use_cime: bool,
    pub use_aamfm: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            modality_dims: None,
            modalities: None,
            d_model: m.d_model,
            blocks_per_stage: m.blocks_per_stage,
            d_state: m.d_state,
            expand: m.expand,
            d_conv: m.d_conv,
            discretization: m.discretization,
            attention: m.attention,
            use_cime: m.use_cime,
            use_aamfm: m.use_aamfm,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            factor: t.factor,
            patience: t.patience,
            min_lr: t.min_lr,
            split: [0.8, 0.1, 0.1],
            seed: t.seed,
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in canonical order.
pub const KEYS: &[&str] = &[
    "modality_dims",
    "modalities",
    "d_model",
    "blocks_per_stage",
    "d_state",
    "expand",
    "d_conv",
    "discretization",
    "attention",
    "use_cime",
    "use_aamfm",
    "loss",
    "lr",
    "epochs",
    "batch_size",
    "factor",
    "patience",
    "min_lr",
    "split",
    "seed",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn opt_list(key: &str, v: &str) -> Result<Option<Vec<usize>>> {
    if v == "auto" || v == "all" {
        Ok(None)
    } else {
        list(key, v).map(Some)
    }
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "modality_dims" => self.modality_dims = opt_list(key, v)?,
            "modalities" => self.modalities = opt_list(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = num(key, v)?,
            "d_state" => self.d_state = num(key, v)?,
            "expand" => self.expand = num(key, v)?,
            "d_conv" => self.d_conv = num(key, v)?,
            "discretization" => {
                self.discretization = match v {
                    "euler" => Discretization::Euler,
                    "zoh" => Discretization::Zoh,
                    _ => return Err(Error::Config(format!("discretization: expected euler or zoh, got '{v}'"))),
                }
            }
            "attention" => {
                self.attention = match v {
                    "softmax" => AttentionNorm::Softmax,
                    "sigmoid_renorm" => AttentionNorm::SigmoidRenorm,
                    _ => {
                        return Err(Error::Config(format!("attention: expected softmax or sigmoid_renorm, got '{v}'")))
                    }
                }
            }
            "use_cime" => self.use_cime = bool_value(key, v)?,
            "use_aamfm" => self.use_aamfm = bool_value(key, v)?,
            "loss" if v == "bce" => {}
            "loss" => return Err(Error::Config(format!("loss: only 'bce' is supported, got '{v}'"))),
            "lr" => self.lr = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "factor" => self.factor = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "min_lr" => self.min_lr = num(key, v)?,
            "split" => {
                let r: Vec<f64> = list(key, v)?;
                self.split =
                    r.try_into().map_err(|_| Error::Config(format!("split: expected three ratios, got '{v}'")))?;
            }
            "seed" => self.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Canonical `key = value` rendering; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let dims = self.modality_dims.as_deref().map_or("auto".to_string(), join);
        let mods = self.modalities.as_deref().map_or("all".to_string(), join);
        let disc = match self.discretization {
            Discretization::Euler => "euler",
            Discretization::Zoh => "zoh",
        };
        let att = match self.attention {
            AttentionNorm::Softmax => "softmax",
            AttentionNorm::SigmoidRenorm => "sigmoid_renorm",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("modality_dims", dims);
        kv("modalities", mods);
        kv("d_model", self.d_model.to_string());
        kv("blocks_per_stage", self.blocks_per_stage.to_string());
        kv("d_state", self.d_state.to_string());
        kv("expand", self.expand.to_string());
        kv("d_conv", self.d_conv.to_string());
        kv("discretization", disc.into());
        kv("attention", att.into());
        kv("use_cime", self.use_cime.to_string());
        kv("use_aamfm", self.use_aamfm.to_string());
        kv("loss", "bce".into());
        kv("lr", self.lr.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("factor", self.factor.to_string());
        kv("patience", self.patience.to_string());
        kv("min_lr", self.min_lr.to_string());
        kv("split", join(&self.split));
        kv("seed", self.seed.to_string());
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            factor: self.factor,
            patience: self.patience,
            min_lr: self.min_lr,
            seed: self.seed,
        }
    }

    /// Model configuration for data whose modalities have `data_dims` channels
    /// (before any modality subset is applied).
    pub fn model_config(&self, data_dims: &[usize]) -> Result<ModelConfig> {
        if let Some(d) = &self.modality_dims {
            if d != data_dims {
                return Err(Error::Config(format!("modality_dims {d:?} do not match the dataset's {data_dims:?}")));
            }
        }
        let dims = match &self.modalities {
            Some(keep) => {
                if let Some(&bad) = keep.iter().find(|&&m| m >= data_dims.len()) {
                    return Err(Error::Config(format!(
                        "modality {bad} out of range (dataset has {})",
                        data_dims.len()
                    )));
                }
                keep.iter().map(|&m| data_dims[m]).collect()
            }
            None => data_dims.to_vec(),
        };
        let cfg = ModelConfig {
            modality_dims: dims,
            d_model: self.d_model,
            blocks_per_stage: self.blocks_per_stage,
            use_cime: self.use_cime,
            use_aamfm: self.use_aamfm,
            attention: self.attention,
            d_state: self.d_state,
            expand: self.expand,
            d_conv: self.d_conv,
            discretization: self.discretization,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        crate::training::split_sizes(3, self.split).map(|_| ())?;
        if self.split[0] <= 0.0 || self.split[1] <= 0.0 {
            return Err(Error::Config("train and validation ratios must be positive".into()));
        }
        if let Some(m) = &self.modalities {
            let mut s = m.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != m.len() || m.len() < 2 {
                return Err(Error::Config(format!("modalities must list at least two distinct indices, got {m:?}")));
            }
        }
        let dims = self.modality_dims.clone().unwrap_or_else(|| vec![1; 3]);
        let probe = RunConfig { modality_dims: None, ..self.clone() };
        probe.model_config(&dims).map(|_| ())
    }
}
