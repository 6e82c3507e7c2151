use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::Serialize;

use super::ExperimentConfig;
use crate::data::{generate_synthetic_with, read_container, split_dataset, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_cycles, MetricsReport};
use crate::models::{fit, Checkpoint, EpochLog, FitOutcome, Model, ModelConfig, Variant};
use crate::objectives::{ElboKind, ElboVariant, NormPenalty};

pub const TRAINVAL_FRACTION: f64 = 0.7;
pub const VALIDATION_FRACTION: f64 = 0.1;

/// The container at `cfg.data`, or a synthetic set sized by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data {
        Some(path) => read_container(path)?,
        None => generate_synthetic_with(&SyntheticConfig {
            text_dim: cfg.model.text_dim,
            image_dim: cfg.model.image_dim,
            ..SyntheticConfig::new(cfg.seed, cfg.synthetic_records, cfg.synthetic_noise)
        })?,
    };
    cfg.model.check_dataset(&ds)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleResult {
    pub cycle: usize,
    pub seed: u64,
    pub train_records: usize,
    pub validation_records: usize,
    pub test_records: usize,
    pub best_epoch: usize,
    pub best_val_weighted_f1: f64,
    pub epochs: Vec<EpochLog>,
    pub test: MetricsReport,
}

/// Wall-clock figures, kept apart from the reproducible results.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub epoch_seconds: Vec<Vec<f64>>,
}

impl Timing {
    pub fn mean_epoch_seconds(&self) -> f64 {
        let all: Vec<f64> = self.epoch_seconds.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub label: String,
    pub config: ExperimentConfig,
    pub cycles: Vec<CycleResult>,
    pub aggregate: MetricsReport,
    pub timing: Timing,
}

/// One seeded train and test cycle. Returns the trained model too.
pub fn run_cycle(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    cycle: usize,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, FitOutcome<f32>, CycleResult)> {
    let seed = cfg.cycle_seed(cycle);
    let split = split_dataset(ds.len(), seed, TRAINVAL_FRACTION, VALIDATION_FRACTION)?;
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let outcome = fit(&mut model, ds, &split, &cfg.train, seed, on_epoch)?;
    let test = model.evaluate(ds, &split.test, cfg.train.threshold)?;
    let result = CycleResult {
        cycle,
        seed,
        train_records: split.train.len(),
        validation_records: split.validation.len(),
        test_records: split.test.len(),
        best_epoch: outcome.best_epoch,
        best_val_weighted_f1: outcome.best_val_weighted_f1,
        epochs: outcome.logs.clone(),
        test,
    };
    Ok((model, outcome, result))
}

/// `cfg.cycles` cycles with consecutive seeds, then their aggregate.
/// Cycles run on [`ExperimentConfig::workers`] threads; `after_cycle` sees
/// each cycle's checkpoint on the calling thread, in cycle order.
pub fn run_cycles(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    label: &str,
    mut after_cycle: impl FnMut(&Checkpoint, &CycleResult) -> Result<()>,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let next = AtomicUsize::new(0);
    let work = || {
        let mut done = Vec::new();
        loop {
            let c = next.fetch_add(1, Ordering::Relaxed);
            if c >= cfg.cycles {
                return done;
            }
            let outcome = run_cycle(ds, cfg, c, |log| {
                log::info!("{label} cycle {c} epoch {} val weighted-F1 {:.4}", log.epoch, log.val_weighted_f1)
            })
            .map(|(model, fit, result)| {
                let ck = Checkpoint::capture(&model, result.best_epoch as u32, Some(&fit.rngs), Some(&fit.optimizers));
                (ck, result)
            });
            done.push((c, outcome));
        }
    };
    let mut finished: Vec<(usize, Result<(Checkpoint, CycleResult)>)> = match cfg.workers() {
        1 => work(),
        n => std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n).map(|_| scope.spawn(work)).collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("cycle worker panicked"))
                .collect()
        }),
    };
    finished.sort_by_key(|(c, _)| *c);
    let mut cycles = Vec::with_capacity(cfg.cycles);
    for (_, outcome) in finished {
        let (ck, result) = outcome?;
        after_cycle(&ck, &result)?;
        cycles.push(result);
    }
    let reports: Vec<MetricsReport> = cycles.iter().map(|c| c.test.clone()).collect();
    let timing = Timing {
        total_seconds: start.elapsed().as_secs_f64(),
        epoch_seconds: cycles
            .iter()
            .map(|c| c.epochs.iter().map(|e| e.seconds).collect())
            .collect(),
    };
    Ok(RunReport {
        label: label.to_string(),
        config: cfg.clone(),
        aggregate: aggregate_cycles(&reports)?,
        cycles,
        timing,
    })
}

// ---------------------------------------------------------------------------
// Ablation grid

pub const ABLATION_GRID: [&str; 8] = [
    "λKL+L2", "λKL+L1", "λKL", "ELBOv2+L2", "ELBOv2", "ELBOv1+L2", "ELBOv1", "M+MO",
];

/// Canonical row name for a grid entry; ASCII spellings such as
/// `lambda_kl+l2` or `m_mo` are accepted too.
pub fn canonical_variant(name: &str) -> Result<&'static str> {
    let key: String = name
        .to_lowercase()
        .replace("λ", "lambda_")
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
        .collect();
    let key = key.replace("lambdakl", "lambda_kl");
    let table = [
        ("lambda_kl+l2", 0),
        ("lambda_kl+l1", 1),
        ("lambda_kl", 2),
        ("elbov2+l2", 3),
        ("elbov2", 4),
        ("elbov1+l2", 5),
        ("elbov1", 6),
        ("m+mo", 7),
        ("mmo", 7),
    ];
    table
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, i)| ABLATION_GRID[*i])
        .ok_or_else(|| {
            Error::config(format!("unknown ablation variant {name:?}; known: {}", ABLATION_GRID.join(", ")))
        })
}

/// The base model config altered to one grid row. Everything not named by
/// the row is shared.
pub fn ablation_config(name: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let name = canonical_variant(name)?;
    let (kind, penalty) = match name {
        "λKL+L2" => (Some(ElboKind::LambdaKl), NormPenalty::L2),
        "λKL+L1" => (Some(ElboKind::LambdaKl), NormPenalty::L1),
        "λKL" => (Some(ElboKind::LambdaKl), NormPenalty::None),
        "ELBOv2+L2" => (Some(ElboKind::V2), NormPenalty::L2),
        "ELBOv2" => (Some(ElboKind::V2), NormPenalty::None),
        "ELBOv1+L2" => (Some(ElboKind::V1), NormPenalty::L2),
        "ELBOv1" => (Some(ElboKind::V1), NormPenalty::None),
        _ => (None, NormPenalty::L2),
    };
    Ok(ModelConfig {
        variant: if kind.is_some() { Variant::PmMo } else { Variant::MMo },
        elbo: ElboVariant {
            kind: kind.unwrap_or(base.elbo.kind),
            ..base.elbo
        },
        norm_penalty: penalty,
        ..base.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: RunReport,
}

pub fn run_ablation(ds: &Dataset, cfg: &ExperimentConfig, grid: &[String]) -> Result<Vec<AblationRow>> {
    let names = grid
        .iter()
        .map(|g| canonical_variant(g))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let row_cfg = ExperimentConfig {
            model: ablation_config(name, &cfg.model)?,
            ..cfg.clone()
        };
        let report = run_cycles(ds, &row_cfg, name, |_, _| Ok(()))?;
        log::info!("{name}: weighted-F1 {:.4}", report.aggregate.weighted);
        rows.push(AblationRow {
            variant: name.to_string(),
            report,
        });
    }
    Ok(rows)
}

/// Rows of `micro macro weighted samples` means, plus a sample standard
/// deviation line per row when there was more than one cycle.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "System", "micro", "macro", "weighted", "samples"
    );
    for (name, r) in rows {
        let pad = width - name.chars().count();
        s += &format!(
            "{name}{:pad$}  {:>8.3}  {:>8.3}  {:>8.3}  {:>8.3}\n",
            "", r.micro, r.macro_, r.weighted, r.samples
        );
        if r.cycles > 1 {
            s += &format!(
                "{:width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
                "",
                format!("±{:.3}", r.std.micro),
                format!("±{:.3}", r.std.macro_),
                format!("±{:.3}", r.std.weighted),
                format!("±{:.3}", r.std.samples)
            );
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Regulariser curves

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveAblation {
    None,
    NoBatchnorm,
    NoMaxnorm,
    NoBoth,
}

impl CurveAblation {
    pub const ALL: [CurveAblation; 4] = [
        CurveAblation::None,
        CurveAblation::NoBatchnorm,
        CurveAblation::NoMaxnorm,
        CurveAblation::NoBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveAblation::None => "none",
            CurveAblation::NoBatchnorm => "no_batchnorm",
            CurveAblation::NoMaxnorm => "no_maxnorm",
            CurveAblation::NoBoth => "no_both",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| {
            Error::config(format!(
                "unknown curve ablation {name:?}; known: none, no_batchnorm, no_maxnorm, no_both"
            ))
        })
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (bn, mn) = match self {
            CurveAblation::None => (true, true),
            CurveAblation::NoBatchnorm => (false, true),
            CurveAblation::NoMaxnorm => (true, false),
            CurveAblation::NoBoth => (false, false),
        };
        ModelConfig {
            use_batchnorm: base.use_batchnorm && bn,
            use_maxnorm: base.use_maxnorm && mn,
            ..base.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
}

/// Trains one cycle until one epoch past the best validation score (or the
/// epoch cap) and returns the per-epoch curve.
pub fn run_curve(ds: &Dataset, cfg: &ExperimentConfig, ablation: CurveAblation) -> Result<Vec<CurveRow>> {
    let curve_cfg = ExperimentConfig {
        model: ablation.apply(&cfg.model),
        train: crate::models::TrainConfig {
            patience: Some(1),
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    curve_cfg.validate()?;
    let (_, _, result) = run_cycle(ds, &curve_cfg, 0, |_| {})?;
    Ok(result
        .epochs
        .iter()
        .map(|e| CurveRow {
            epoch: e.epoch,
            train_loss: e.train.total,
            val_weighted_f1: e.val_weighted_f1,
        })
        .collect())
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_weighted_f1\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.epoch, r.train_loss, r.val_weighted_f1);
    }
    s
}
