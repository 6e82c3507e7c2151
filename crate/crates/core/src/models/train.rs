use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Model, Variant};
use crate::data::{batches, Batch, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::objectives::{
    bce_with_logits, bernoulli_nll, elbo_loss, with_penalty, LossBreakdown, Objective, SampledPass,
};
use crate::optimizers::{Adam, AdamConfig};
use crate::random::{Rng, RngState, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a new best validation score.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub threshold: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            epochs: 20,
            patience: Some(3),
            batch_size: 512,
            threshold: 0.5,
            clip_norm: AdamConfig::DEFAULT_CLIP_NORM,
            weight_decay: AdamConfig::DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("lr, epochs and batch_size must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("clip_norm must be > 0 and weight_decay ≥ 0"));
        }
        Ok(())
    }
}

/// The trainer's random streams.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub sampling: Rng,
    pub dropout: Rng,
    pub shuffle: Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            sampling: Rng::for_stream(seed, Stream::Sampling),
            dropout: Rng::for_stream(seed, Stream::Dropout),
            shuffle: Rng::for_stream(seed, Stream::Shuffle),
        }
    }

    pub fn states(&self) -> [RngState; 3] {
        [self.sampling.state(), self.dropout.state(), self.shuffle.state()]
    }

    pub fn from_states(s: &[RngState; 3]) -> Self {
        TrainRngs {
            sampling: Rng::from_state(&s[0]),
            dropout: Rng::from_state(&s[1]),
            shuffle: Rng::from_state(&s[2]),
        }
    }
}

/// Clipped Adam over module A and AdamW over module C, or a single Adam
/// over everything for the baseline.
#[derive(Clone, Debug)]
pub struct Optimizers<T: Scalar> {
    pub a: Adam<T>,
    pub c: Option<Adam<T>>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn step(&mut self) -> Result<()> {
        self.a.step()?;
        if let Some(c) = &mut self.c {
            c.step()?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.a.zero_grad();
        if let Some(c) = &self.c {
            c.zero_grad();
        }
    }

    pub fn all(&self) -> Vec<&Adam<T>> {
        std::iter::once(&self.a).chain(self.c.as_ref()).collect()
    }

    pub fn all_mut(&mut self) -> Vec<&mut Adam<T>> {
        std::iter::once(&mut self.a).chain(self.c.as_mut()).collect()
    }
}

pub fn build_optimizers<T: Scalar>(model: &Model<T>, cfg: &TrainConfig) -> Result<Optimizers<T>> {
    let trainable = |ps: Vec<crate::layers::NamedParam<T>>| -> Vec<Tensor<T>> {
        ps.into_iter().filter(|p| p.role.trainable()).map(|p| p.tensor).collect()
    };
    if model.config.variant == Variant::GmuBaseline {
        return Ok(Optimizers {
            a: Adam::new(trainable(model.params()), AdamConfig::adam(cfg.lr))?,
            c: None,
        });
    }
    Ok(Optimizers {
        a: Adam::new(trainable(model.a_params()), AdamConfig::clipped(cfg.lr, cfg.clip_norm))?,
        c: Some(Adam::new(
            trainable(model.c_params()),
            AdamConfig::adamw(cfg.lr, cfg.weight_decay),
        )?),
    })
}

fn objective<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<T>,
    epoch: usize,
    rngs: &mut TrainRngs,
    train_set_size: usize,
) -> Result<Objective<T>> {
    let cfg = model.config.clone();
    match cfg.variant {
        Variant::GmuBaseline => {
            let f = model.forward(&batch.text, &batch.image, Some(rngs), Mode::Train)?;
            let loss = bce_with_logits(&f.logits, &batch.labels)?;
            let v = loss.item().to_f64().unwrap_or(f64::NAN);
            Ok(Objective {
                loss,
                breakdown: LossBreakdown {
                    total: v,
                    likelihood_term: v,
                    ..Default::default()
                },
            })
        }
        Variant::MMo => {
            let f = model.forward(&batch.text, &batch.image, Some(rngs), Mode::Train)?;
            let nll = bernoulli_nll(&f.logits, &batch.labels)?;
            let v = nll.item().to_f64().unwrap_or(f64::NAN);
            let obj = Objective {
                loss: nll,
                breakdown: LossBreakdown {
                    total: v,
                    likelihood_term: v,
                    ..Default::default()
                },
            };
            with_penalty(obj, cfg.norm_penalty, &model.a.penalised(), cfg.lambda_norm)
        }
        Variant::PmMo => {
            let mut passes = Vec::with_capacity(cfg.elbo.mc_samples);
            for _ in 0..cfg.elbo.mc_samples {
                let f = model.forward(&batch.text, &batch.image, Some(rngs), Mode::Train)?;
                passes.push(SampledPass {
                    sites: f.fusion.sites,
                    nll: bernoulli_nll(&f.logits, &batch.labels)?,
                });
            }
            let scale = batch.len() as f64 / train_set_size.max(1) as f64;
            let obj = elbo_loss(&passes, scale, epoch, &cfg.elbo)?;
            with_penalty(obj, cfg.norm_penalty, &model.a.penalised(), cfg.lambda_norm)
        }
    }
}

/// One forward pass, one backward pass, then both optimizers and the
/// max-norm projection.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &Batch<T>,
    opts: &mut Optimizers<T>,
    epoch: usize,
    rngs: &mut TrainRngs,
    train_set_size: usize,
) -> Result<LossBreakdown> {
    let obj = objective(model, batch, epoch, rngs, train_set_size)?;
    if let Some(term) = obj.breakdown.non_finite_term() {
        return Err(Error::Divergence {
            epoch,
            term: term.to_string(),
        });
    }
    opts.zero_grad();
    obj.loss.backward()?;
    let bad_grad = opts
        .all()
        .iter()
        .flat_map(|o| o.params())
        .any(|p| p.grad_ref().as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())));
    if bad_grad {
        return Err(Error::Divergence {
            epoch,
            term: "gradient".into(),
        });
    }
    opts.step()?;
    if model.config.use_maxnorm {
        model.project_max_norm()?;
    }
    Ok(obj.breakdown)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-size-weighted mean of the step breakdowns.
    pub train: LossBreakdown,
    pub val_weighted_f1: f64,
    pub kl_scale: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T: Scalar> {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_weighted_f1: f64,
    pub optimizers: Optimizers<T>,
    pub rngs: TrainRngs,
}

fn mean_breakdown(acc: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let n: usize = acc.iter().map(|(_, k)| k).sum();
    let w = |f: fn(&LossBreakdown) -> f64| {
        acc.iter().map(|(b, k)| f(b) * *k as f64).sum::<f64>() / n.max(1) as f64
    };
    LossBreakdown {
        total: w(|b| b.total),
        likelihood_term: w(|b| b.likelihood_term),
        kl_term: w(|b| b.kl_term),
        l1_term: w(|b| b.l1_term),
        l2_term: w(|b| b.l2_term),
        kl_scale_applied: w(|b| b.kl_scale_applied),
    }
}

/// Trains on `split.train`, scores `split.validation` after every epoch and
/// stops early on the weighted F1. The best epoch's weights are restored.
/// An unset λKL anneal length becomes `cfg.epochs` in `model.config`.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    model.config.check_dataset(ds)?;
    model.config.elbo = model.config.elbo.for_run(cfg.epochs);
    let mut rngs = TrainRngs::new(seed);
    let mut opts = build_optimizers(model, cfg)?;
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<T>>)> = None;
    let n_train = split.train.len();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order = split.train.clone();
        rngs.shuffle.shuffle(&mut order);
        let mut acc = Vec::new();
        for batch in batches::<T>(ds, &order, cfg.batch_size, None)? {
            let batch = batch?;
            if batch.len() < 2 && model.config.use_batchnorm {
                log::debug!("skipping a single-record batch in epoch {epoch}");
                continue;
            }
            let bd = train_step(model, &batch, &mut opts, epoch, &mut rngs, n_train)?;
            acc.push((bd, batch.len()));
        }
        let val = model.evaluate(ds, &split.validation, cfg.threshold)?.weighted;
        let log = EpochLog {
            epoch,
            train: mean_breakdown(&acc),
            val_weighted_f1: val,
            kl_scale: if model.config.variant.is_variational() {
                model.config.elbo.kl_scale(epoch)
            } else {
                0.0
            },
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val weighted-F1 {val:.4}",
            log.train.total
        );
        on_epoch(&log);
        logs.push(log);

        match &best {
            Some((_, b, _)) if val <= *b => {}
            _ => best = Some((epoch, val, model.snapshot())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }

    let (best_epoch, best_val, snap) = best.ok_or_else(|| Error::contract("no epoch ran"))?;
    model.restore(&snap)?;
    Ok(FitOutcome {
        logs,
        best_epoch,
        best_val_weighted_f1: best_val,
        optimizers: opts,
        rngs,
    })
}
