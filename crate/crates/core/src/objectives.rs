//! Losses: multilabel BCE for the classifier and the negative-ELBO family
//! for the variational fusion module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::KlSite;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboKind {
    V1,
    V2,
    LambdaKl,
}

/// Which KL estimator the annealed variant scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    Analytic,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboVariant {
    pub kind: ElboKind,
    pub mc_samples: usize,
    pub lambda0: f64,
    /// `None` anneals over the whole run; `fit` fills it in.
    pub anneal_epochs: Option<usize>,
    /// Hold λ at `lambda0` instead of annealing.
    pub kl_scale_fixed: bool,
    pub lambda_base: KlEstimator,
}

impl ElboVariant {
    pub const DEFAULT_LAMBDA0: f64 = 0.2;

    pub fn v1() -> Self {
        Self::of(ElboKind::V1)
    }

    pub fn v2() -> Self {
        Self::of(ElboKind::V2)
    }

    /// Annealed over however many epochs the run has.
    pub fn lambda_kl_over_run() -> Self {
        Self::of(ElboKind::LambdaKl)
    }

    pub fn lambda_kl(anneal_epochs: usize) -> Self {
        ElboVariant {
            anneal_epochs: Some(anneal_epochs),
            ..Self::of(ElboKind::LambdaKl)
        }
    }

    fn of(kind: ElboKind) -> Self {
        ElboVariant {
            kind,
            mc_samples: 1,
            lambda0: Self::DEFAULT_LAMBDA0,
            anneal_epochs: None,
            kl_scale_fixed: false,
            lambda_base: KlEstimator::Analytic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 1 {
            return Err(Error::contract("mc_samples must be at least 1"));
        }
        if !(self.lambda0 > 0.0 && self.lambda0 <= 1.0) {
            return Err(Error::contract(format!("lambda0 {} outside (0, 1]", self.lambda0)));
        }
        if self.kind == ElboKind::LambdaKl && self.anneal_epochs == Some(0) {
            return Err(Error::contract("anneal_epochs must be at least 1"));
        }
        Ok(())
    }

    /// KL multiplier at `epoch` (0-based): 1 for the plain estimators,
    /// `min(1, λ₀ + (1 − λ₀)·epoch/anneal_epochs)` for the annealed one.
    /// An unset anneal length counts as one epoch.
    pub fn kl_scale(&self, epoch: usize) -> f64 {
        let anneal = self.anneal_epochs.unwrap_or(1).max(1);
        match self.kind {
            ElboKind::V1 | ElboKind::V2 => 1.0,
            ElboKind::LambdaKl if self.kl_scale_fixed => self.lambda0,
            ElboKind::LambdaKl if epoch >= anneal => 1.0,
            ElboKind::LambdaKl => {
                let t = epoch as f64 / anneal as f64;
                (self.lambda0 + (1.0 - self.lambda0) * t).min(1.0)
            }
        }
    }

    /// Fills an unset anneal length with `epochs`.
    pub fn for_run(self, epochs: usize) -> Self {
        ElboVariant {
            anneal_epochs: self.anneal_epochs.or(Some(epochs.max(1))),
            ..self
        }
    }

    pub fn estimator(&self) -> KlEstimator {
        match self.kind {
            ElboKind::V1 => KlEstimator::MonteCarlo,
            ElboKind::V2 => KlEstimator::Analytic,
            ElboKind::LambdaKl => self.lambda_base,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPenalty {
    None,
    L1,
    L2,
}

/// Scalar view of one loss evaluation.
///
/// `total = likelihood_term + kl_scale_applied·kl_term + l1_term + l2_term`,
/// where `kl_term` already carries the minibatch scale and the unselected
/// penalty is reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub likelihood_term: f64,
    pub kl_term: f64,
    pub l1_term: f64,
    pub l2_term: f64,
    pub kl_scale_applied: f64,
}

impl LossBreakdown {
    pub fn recombined(&self) -> f64 {
        self.likelihood_term + self.kl_scale_applied * self.kl_term + self.l1_term + self.l2_term
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("likelihood", self.likelihood_term),
            ("kl", self.kl_term),
            ("l1", self.l1_term),
            ("l2", self.l2_term),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// A differentiable loss together with its breakdown.
#[derive(Clone, Debug)]
pub struct Objective<T: Scalar> {
    pub loss: Tensor<T>,
    pub breakdown: LossBreakdown,
}

/// One sampled forward pass: the KL sites it drew and its summed NLL.
#[derive(Clone, Debug)]
pub struct SampledPass<T: Scalar> {
    pub sites: Vec<KlSite<T>>,
    pub nll: Tensor<T>,
}

fn check_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if logits.shape() != targets.shape() || logits.rank() != 2 {
        return Err(Error::dim("bce_with_logits", logits.shape(), targets.shape()));
    }
    Ok(())
}

/// Mean over the batch of the per-row summed binary cross-entropy.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    check_logits(logits, targets)?;
    let b = logits.shape()[0];
    Ok(logits
        .bce_with_logits_elementwise(targets)?
        .sum()
        .scale(T::lit(1.0 / b as f64)))
}

/// Summed Bernoulli negative log-likelihood of a batch.
pub fn bernoulli_nll<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    check_logits(logits, targets)?;
    Ok(logits.bce_with_logits_elementwise(targets)?.sum())
}

fn mean_of<T: Scalar>(terms: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let n = terms.len();
    let mut acc = Tensor::scalar(T::zero());
    for t in terms {
        acc = acc.add(&t)?;
    }
    Ok(acc.scale(T::lit(1.0 / n as f64)))
}

fn check_passes<T: Scalar>(passes: &[SampledPass<T>]) -> Result<()> {
    if passes.is_empty() {
        return Err(Error::contract("ELBO needs at least one sampled pass"));
    }
    Ok(())
}

fn kl_estimate<T: Scalar>(
    passes: &[SampledPass<T>],
    estimator: KlEstimator,
) -> Result<Tensor<T>> {
    match estimator {
        KlEstimator::Analytic => crate::layers::sum_analytic_kl(&passes[0].sites),
        KlEstimator::MonteCarlo => {
            let per_pass = passes
                .iter()
                .map(|p| {
                    let mut acc = Tensor::scalar(T::zero());
                    for s in &p.sites {
                        acc = acc.add(&s.monte_carlo_kl()?)?;
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()?;
            mean_of(per_pass)
        }
    }
}

fn assemble<T: Scalar>(
    passes: &[SampledPass<T>],
    estimator: KlEstimator,
    minibatch_scale: f64,
    kl_scale: f64,
) -> Result<Objective<T>> {
    check_passes(passes)?;
    let nll = mean_of(passes.iter().map(|p| p.nll.clone()).collect())?;
    let kl = kl_estimate(passes, estimator)?.scale(T::lit(minibatch_scale));
    let loss = nll.add(&kl.scale(T::lit(kl_scale)))?;
    let f = |t: &Tensor<T>| t.item().to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        total: f(&loss),
        likelihood_term: f(&nll),
        kl_term: f(&kl),
        l1_term: 0.0,
        l2_term: 0.0,
        kl_scale_applied: kl_scale,
    };
    Ok(Objective { loss, breakdown })
}

/// Negative ELBO with a Monte-Carlo KL: per pass, `Σ (log q(θ) − log p(θ))`
/// at the drawn θ, averaged over passes and scaled by `minibatch_scale`,
/// plus the mean NLL.
pub fn elbo_v1_loss<T: Scalar>(passes: &[SampledPass<T>], minibatch_scale: f64) -> Result<Objective<T>> {
    assemble(passes, KlEstimator::MonteCarlo, minibatch_scale, 1.0)
}

/// Negative ELBO with the closed-form KL in place of the sampled one.
pub fn elbo_v2_loss<T: Scalar>(passes: &[SampledPass<T>], minibatch_scale: f64) -> Result<Objective<T>> {
    assemble(passes, KlEstimator::Analytic, minibatch_scale, 1.0)
}

/// Negative ELBO with the KL term scaled by the variant's schedule.
pub fn lambda_kl_loss<T: Scalar>(
    passes: &[SampledPass<T>],
    minibatch_scale: f64,
    epoch: usize,
    variant: &ElboVariant,
) -> Result<Objective<T>> {
    if variant.kind != ElboKind::LambdaKl {
        return Err(Error::contract("lambda_kl_loss needs a lambda_kl variant"));
    }
    variant.validate()?;
    assemble(passes, variant.lambda_base, minibatch_scale, variant.kl_scale(epoch))
}

/// Dispatches on `variant.kind`.
pub fn elbo_loss<T: Scalar>(
    passes: &[SampledPass<T>],
    minibatch_scale: f64,
    epoch: usize,
    variant: &ElboVariant,
) -> Result<Objective<T>> {
    variant.validate()?;
    match variant.kind {
        ElboKind::V1 => elbo_v1_loss(passes, minibatch_scale),
        ElboKind::V2 => elbo_v2_loss(passes, minibatch_scale),
        ElboKind::LambdaKl => lambda_kl_loss(passes, minibatch_scale, epoch, variant),
    }
}

/// `(λ·Σ|loc|, λ·Σ loc²)` over all given tensors.
pub fn vi_norm_penalties<T: Scalar>(
    locs: &[Tensor<T>],
    lambda_norm: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(lambda_norm >= 0.0) {
        return Err(Error::contract(format!("penalty weight {lambda_norm} is negative")));
    }
    let mut l1 = Tensor::scalar(T::zero());
    let mut l2 = Tensor::scalar(T::zero());
    for loc in locs {
        l1 = l1.add(&loc.abs().sum())?;
        l2 = l2.add(&loc.mul(loc)?.sum())?;
    }
    let lam = T::lit(lambda_norm);
    Ok((l1.scale(lam), l2.scale(lam)))
}

/// Adds the selected penalty to `obj`.
pub fn with_penalty<T: Scalar>(
    mut obj: Objective<T>,
    penalty: NormPenalty,
    locs: &[Tensor<T>],
    lambda_norm: f64,
) -> Result<Objective<T>> {
    if penalty == NormPenalty::None {
        return Ok(obj);
    }
    let (l1, l2) = vi_norm_penalties(locs, lambda_norm)?;
    let term = if penalty == NormPenalty::L1 { l1 } else { l2 };
    let v = term.item().to_f64().unwrap_or(f64::NAN);
    match penalty {
        NormPenalty::L1 => obj.breakdown.l1_term = v,
        _ => obj.breakdown.l2_term = v,
    }
    obj.loss = obj.loss.add(&term)?;
    obj.breakdown.total = obj.loss.item().to_f64().unwrap_or(f64::NAN);
    Ok(obj)
}
