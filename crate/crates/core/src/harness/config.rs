use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, TrainConfig, Variant};
use crate::objectives::{ElboKind, KlEstimator, NormPenalty};

/// Everything one command needs: model, training loop, cycles and I/O.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub cycles: usize,
    /// Cycles trained at once; 0 uses every available core.
    pub jobs: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Records generated when no data file is given.
    pub synthetic_records: usize,
    pub synthetic_noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    PmMoPaper,
    GmuPaper,
    PmMo1024,
    Synthetic,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::PmMoPaper, Preset::GmuPaper, Preset::PmMo1024, Preset::Synthetic];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PmMoPaper => "pm-mo-paper",
            Preset::GmuPaper => "gmu-paper",
            Preset::PmMo1024 => "pm-mo-1024",
            Preset::Synthetic => "synthetic",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
            })
    }

    pub fn config(self) -> ExperimentConfig {
        let base = ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            cycles: 5,
            jobs: 0,
            data: None,
            out: None,
            synthetic_records: 2000,
            synthetic_noise: 0.1,
        };
        match self {
            Preset::PmMoPaper => base,
            Preset::GmuPaper => ExperimentConfig {
                model: ModelConfig {
                    variant: Variant::GmuBaseline,
                    dropout: 0.7,
                    norm_penalty: NormPenalty::None,
                    ..base.model
                },
                train: TrainConfig { lr: 0.001, ..base.train },
                ..base
            },
            Preset::PmMo1024 => ExperimentConfig {
                model: ModelConfig { hidden_width: 1024, ..base.model },
                ..base
            },
            Preset::Synthetic => ExperimentConfig {
                model: ModelConfig {
                    image_dim: 1024,
                    hidden_width: 128,
                    classifier_width: 128,
                    dropout: 0.2,
                    ..base.model
                },
                train: TrainConfig {
                    batch_size: 64,
                    epochs: 30,
                    patience: Some(8),
                    ..base.train
                },
                ..base
            },
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Preset::PmMoPaper.config()
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} = {value:?}: expected true or false"))),
    }
}

fn parse_enum<V: Copy>(key: &str, value: &str, options: &[(&str, V)]) -> Result<V> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            Error::config(format!("{key} = {value:?}: expected one of {}", names.join(", ")))
        })
}

pub const KEYS: [&str; 39] = [
    "text_dim", "image_dim", "hidden_width", "classifier_width", "maxout_pieces", "n_classes",
    "dropout", "variant", "elbo", "mc_samples", "lambda0", "anneal_epochs", "kl_scale_fixed",
    "lambda_base", "norm_penalty", "lambda_norm", "use_batchnorm", "use_maxnorm", "maxnorm_c",
    "modality", "loc_init", "scale_init", "prior_loc", "prior_scale", "lr", "epochs", "patience",
    "batch_size", "threshold", "clip_norm", "weight_decay", "seed", "cycles", "jobs", "data", "out",
    "synthetic_records", "synthetic_noise", "preset",
];

impl ExperimentConfig {
    /// Sets one key. `preset` replaces the whole configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "text_dim" => m.text_dim = parse(key, value)?,
            "image_dim" => m.image_dim = parse(key, value)?,
            "hidden_width" => m.hidden_width = parse(key, value)?,
            "classifier_width" => m.classifier_width = parse(key, value)?,
            "maxout_pieces" => m.maxout_pieces = parse(key, value)?,
            "n_classes" => m.n_classes = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "variant" => {
                m.variant = parse_enum(
                    key,
                    value,
                    &[("pm_mo", Variant::PmMo), ("m_mo", Variant::MMo), ("gmu_baseline", Variant::GmuBaseline)],
                )?
            }
            "elbo" => {
                m.elbo.kind = parse_enum(
                    key,
                    value,
                    &[("v1", ElboKind::V1), ("v2", ElboKind::V2), ("lambda_kl", ElboKind::LambdaKl)],
                )?
            }
            "mc_samples" => m.elbo.mc_samples = parse(key, value)?,
            "lambda0" => m.elbo.lambda0 = parse(key, value)?,
            "anneal_epochs" => {
                m.elbo.anneal_epochs = match value {
                    "run" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "kl_scale_fixed" => m.elbo.kl_scale_fixed = parse_bool(key, value)?,
            "lambda_base" => {
                m.elbo.lambda_base = parse_enum(
                    key,
                    value,
                    &[("analytic", KlEstimator::Analytic), ("monte_carlo", KlEstimator::MonteCarlo)],
                )?
            }
            "norm_penalty" => {
                m.norm_penalty = parse_enum(
                    key,
                    value,
                    &[("none", NormPenalty::None), ("l1", NormPenalty::L1), ("l2", NormPenalty::L2)],
                )?
            }
            "lambda_norm" => m.lambda_norm = parse(key, value)?,
            "use_batchnorm" => m.use_batchnorm = parse_bool(key, value)?,
            "use_maxnorm" => m.use_maxnorm = parse_bool(key, value)?,
            "maxnorm_c" => m.maxnorm_c = parse(key, value)?,
            "modality" => {
                m.modality = parse_enum(
                    key,
                    value,
                    &[
                        ("both", Modality::Both),
                        ("text_only", Modality::TextOnly),
                        ("image_only", Modality::ImageOnly),
                    ],
                )?
            }
            "loc_init" => m.loc_init = parse(key, value)?,
            "scale_init" => m.scale_init = parse(key, value)?,
            "prior_loc" => m.prior_loc = parse(key, value)?,
            "prior_scale" => m.prior_scale = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "patience" => {
                t.patience = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch_size" => t.batch_size = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "cycles" => self.cycles = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "synthetic_records" => self.synthetic_records = parse(key, value)?,
            "synthetic_noise" => self.synthetic_noise = parse(key, value)?,
            "preset" => *self = Preset::from_name(value)?.config(),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file on top of `self`. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.cycles == 0 {
            return Err(Error::config("cycles must be at least 1"));
        }
        if self.data.is_none() && self.synthetic_records < 10 {
            return Err(Error::config("synthetic_records must be at least 10"));
        }
        if !(self.synthetic_noise >= 0.0) {
            return Err(Error::config("synthetic_noise must be ≥ 0"));
        }
        Ok(())
    }

    /// Seed of cycle `c`: consecutive from the base seed.
    /// Worker threads for `cycles` cycles.
    pub fn workers(&self) -> usize {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let jobs = if self.jobs == 0 { cores } else { self.jobs };
        jobs.clamp(1, self.cycles.max(1))
    }

    pub fn cycle_seed(&self, c: usize) -> u64 {
        self.seed.wrapping_add(c as u64)
    }

    /// The configuration as `key = value` lines that [`apply_text`] reads
    /// back to an equal value.
    ///
    /// [`apply_text`]: ExperimentConfig::apply_text
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut lines = vec![
            format!("text_dim = {}", m.text_dim),
            format!("image_dim = {}", m.image_dim),
            format!("hidden_width = {}", m.hidden_width),
            format!("classifier_width = {}", m.classifier_width),
            format!("maxout_pieces = {}", m.maxout_pieces),
            format!("n_classes = {}", m.n_classes),
            format!("dropout = {}", m.dropout),
            format!("variant = {}", snake(&m.variant)),
            format!("elbo = {}", snake(&m.elbo.kind)),
            format!("mc_samples = {}", m.elbo.mc_samples),
            format!("lambda0 = {}", m.elbo.lambda0),
            format!(
                "anneal_epochs = {}",
                m.elbo.anneal_epochs.map_or("run".to_string(), |n| n.to_string())
            ),
            format!("kl_scale_fixed = {}", m.elbo.kl_scale_fixed),
            format!("lambda_base = {}", snake(&m.elbo.lambda_base)),
            format!("norm_penalty = {}", snake(&m.norm_penalty)),
            format!("lambda_norm = {}", m.lambda_norm),
            format!("use_batchnorm = {}", m.use_batchnorm),
            format!("use_maxnorm = {}", m.use_maxnorm),
            format!("maxnorm_c = {}", m.maxnorm_c),
            format!("modality = {}", snake(&m.modality)),
            format!("loc_init = {}", m.loc_init),
            format!("scale_init = {}", m.scale_init),
            format!("prior_loc = {}", m.prior_loc),
            format!("prior_scale = {}", m.prior_scale),
            format!("lr = {}", t.lr),
            format!("epochs = {}", t.epochs),
            format!("patience = {}", t.patience.map_or("none".into(), |p| p.to_string())),
            format!("batch_size = {}", t.batch_size),
            format!("threshold = {}", t.threshold),
            format!("clip_norm = {}", t.clip_norm),
            format!("weight_decay = {}", t.weight_decay),
            format!("seed = {}", self.seed),
            format!("cycles = {}", self.cycles),
            format!("jobs = {}", self.jobs),
            format!("synthetic_records = {}", self.synthetic_records),
            format!("synthetic_noise = {}", self.synthetic_noise),
        ];
        if let Some(d) = &self.data {
            lines.push(format!("data = {}", d.display()));
        }
        if let Some(o) = &self.out {
            lines.push(format!("out = {}", o.display()));
        }
        lines.join("\n") + "\n"
    }
}

fn snake<V: Serialize>(v: &V) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}
