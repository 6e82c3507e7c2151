//! Network building blocks.
//!
//! Every layer exposes its learnable tensors and buffers through
//! [`Parameterized::visit_params`], which is what optimizers, projections and
//! checkpoints iterate over.

use crate::error::{Error, Result};
use crate::random::{
    laplace_log_prob_tensor, laplace_noise, softplus_inverse, LaplaceParams,
    Rng,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a Bayesian layer picks its weights for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// One reparameterized draw shared by the whole minibatch.
    Sample,
    /// Posterior locations.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    WeightLoc,
    WeightRho,
    BiasLoc,
    BiasRho,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Rows of these tensors are bounded by the max-norm constraint.
    pub fn max_norm_applies(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::WeightLoc)
    }
}

#[derive(Clone, Debug)]
pub struct NamedParam<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub role: ParamRole,
}

pub trait Parameterized<T: Scalar> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>);

    fn params(&self, prefix: &str) -> Vec<NamedParam<T>> {
        let mut out = Vec::new();
        self.visit_params(prefix, &mut out);
        out
    }
}

fn push<T: Scalar>(out: &mut Vec<NamedParam<T>>, prefix: &str, name: &str, t: &Tensor<T>, role: ParamRole) {
    out.push(NamedParam {
        name: format!("{prefix}.{name}"),
        tensor: t.clone(),
        role,
    });
}

// ---------------------------------------------------------------------------
// Deterministic linear

#[derive(Clone, Debug)]
pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    /// Uniform(−1/√in, 1/√in) initialisation for weight and bias.
    pub fn new(in_width: usize, out_width: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (in_width as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit((2.0 * rng.uniform() - 1.0) * bound))
                .collect()
        };
        let w = draw(in_width * out_width);
        let b = draw(out_width);
        Self::from_parts(
            Tensor::param(w, &[out_width, in_width])?,
            Tensor::param(b, &[out_width])?,
        )
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::dim("linear", weight.shape(), bias.shape()));
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x · weightᵀ + bias`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, &self.bias)
    }
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    x.matmul_nt(w)?.add(b)
}

impl<T: Scalar> Parameterized<T> for LinearLayer<T> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>) {
        push(out, prefix, "weight", &self.weight, ParamRole::Weight);
        push(out, prefix, "bias", &self.bias, ParamRole::Bias);
    }
}

// ---------------------------------------------------------------------------
// Bayesian linear

/// Learnable Laplace posterior over a tensor: location plus an unconstrained
/// `rho` with scale `softplus(rho)`.
#[derive(Clone, Debug)]
pub struct VariationalParameter<T: Scalar> {
    pub loc: Tensor<T>,
    pub rho: Tensor<T>,
}

impl<T: Scalar> VariationalParameter<T> {
    pub fn constant(shape: &[usize], loc: f64, scale: f64) -> Result<Self> {
        let n = shape.iter().product();
        let rho = softplus_inverse(scale)?;
        Ok(VariationalParameter {
            loc: Tensor::param(vec![T::lit(loc); n], shape)?,
            rho: Tensor::param(vec![T::lit(rho); n], shape)?,
        })
    }

    pub fn scale(&self) -> Tensor<T> {
        self.rho.softplus()
    }

    pub fn shape(&self) -> &[usize] {
        self.loc.shape()
    }

    /// `loc + softplus(rho) ⊙ ε` with fresh standard Laplace noise per element.
    pub fn sample(&self, rng: &mut Rng) -> Result<Tensor<T>> {
        let noise: Vec<T> = (0..self.loc.numel())
            .map(|_| laplace_noise(rng.uniform_open_half()).map(T::lit))
            .collect::<Result<_>>()?;
        self.loc.laplace_reparam(&self.rho, noise)
    }
}

/// One variational tensor as seen by a loss: its posterior, the prior and,
/// for sampled passes, the drawn value.
#[derive(Clone, Debug)]
pub struct KlSite<T: Scalar> {
    pub loc: Tensor<T>,
    pub rho: Tensor<T>,
    pub prior: LaplaceParams,
    pub sample: Option<Tensor<T>>,
}

impl<T: Scalar> KlSite<T> {
    /// Closed-form `Σ KL(q ‖ prior)`.
    pub fn analytic_kl(&self) -> Result<Tensor<T>> {
        self.loc
            .laplace_kl_sum(&self.rho, T::lit(self.prior.loc()), T::lit(self.prior.scale()))
    }

    /// Single-draw estimate `Σ (log q(θ) − log prior(θ))` at the sampled θ.
    pub fn monte_carlo_kl(&self) -> Result<Tensor<T>> {
        let theta = self
            .sample
            .as_ref()
            .ok_or_else(|| Error::contract("Monte-Carlo KL needs a sampled forward pass"))?;
        let log_q = laplace_log_prob_tensor(theta, &self.loc, &self.rho.softplus())?;
        let prior_loc = Tensor::full(theta.shape(), T::lit(self.prior.loc()));
        let prior_scale = Tensor::full(theta.shape(), T::lit(self.prior.scale()));
        let log_p = laplace_log_prob_tensor(theta, &prior_loc, &prior_scale)?;
        log_q.sub(&log_p)
    }
}

#[derive(Clone, Debug)]
pub struct BayesLinearLayer<T: Scalar> {
    pub weight: VariationalParameter<T>,
    pub bias: VariationalParameter<T>,
    pub prior: LaplaceParams,
}

/// Result of a Bayesian forward pass.
#[derive(Clone, Debug)]
pub struct BayesForward<T: Scalar> {
    pub output: Tensor<T>,
    pub sites: Vec<KlSite<T>>,
}

impl<T: Scalar> BayesForward<T> {
    /// Analytic KL summed over the layer's weight and bias.
    pub fn kl_contribution(&self) -> Result<Tensor<T>> {
        sum_analytic_kl(&self.sites)
    }
}

pub(crate) fn sum_analytic_kl<T: Scalar>(sites: &[KlSite<T>]) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    for site in sites {
        total = total.add(&site.analytic_kl()?)?;
    }
    Ok(total)
}

impl<T: Scalar> BayesLinearLayer<T> {
    /// Posterior at `Laplace(loc_init, scale_init)` for every element.
    pub fn new(
        in_width: usize,
        out_width: usize,
        loc_init: f64,
        scale_init: f64,
        prior: LaplaceParams,
    ) -> Result<Self> {
        Ok(BayesLinearLayer {
            weight: VariationalParameter::constant(&[out_width, in_width], loc_init, scale_init)?,
            bias: VariationalParameter::constant(&[out_width], loc_init, scale_init)?,
            prior,
        })
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        rng: Option<&mut Rng>,
        mode: SampleMode,
    ) -> Result<BayesForward<T>> {
        let (w, b) = match mode {
            SampleMode::Mean => (self.weight.loc.clone(), self.bias.loc.clone()),
            SampleMode::Sample => {
                let rng = rng.ok_or_else(|| Error::contract("sampled forward needs an rng"))?;
                (self.weight.sample(rng)?, self.bias.sample(rng)?)
            }
        };
        let output = linear(x, &w, &b)?;
        let sampled = mode == SampleMode::Sample;
        let site = |p: &VariationalParameter<T>, drawn: Tensor<T>| KlSite {
            loc: p.loc.clone(),
            rho: p.rho.clone(),
            prior: self.prior,
            sample: sampled.then_some(drawn),
        };
        Ok(BayesForward {
            output,
            sites: vec![site(&self.weight, w), site(&self.bias, b)],
        })
    }

    pub fn kl_contribution(&self) -> Result<Tensor<T>> {
        sum_analytic_kl(&[
            KlSite {
                loc: self.weight.loc.clone(),
                rho: self.weight.rho.clone(),
                prior: self.prior,
                sample: None,
            },
            KlSite {
                loc: self.bias.loc.clone(),
                rho: self.bias.rho.clone(),
                prior: self.prior,
                sample: None,
            },
        ])
    }

    /// A deterministic layer holding the posterior locations.
    pub fn mean_layer(&self) -> LinearLayer<T> {
        LinearLayer {
            weight: self.weight.loc.clone(),
            bias: self.bias.loc.clone(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for BayesLinearLayer<T> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>) {
        push(out, prefix, "weight_loc", &self.weight.loc, ParamRole::WeightLoc);
        push(out, prefix, "weight_rho", &self.weight.rho, ParamRole::WeightRho);
        push(out, prefix, "bias_loc", &self.bias.loc, ParamRole::BiasLoc);
        push(out, prefix, "bias_rho", &self.bias.rho, ParamRole::BiasRho);
    }
}

// ---------------------------------------------------------------------------
// Batch normalisation

#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(width: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) || !(epsilon > 0.0) {
            return Err(Error::contract(format!(
                "batchnorm needs momentum in (0,1) and epsilon > 0, got {momentum}, {epsilon}"
            )));
        }
        Ok(BatchNorm {
            gamma: Tensor::param(vec![T::one(); width], &[width])?,
            beta: Tensor::param(vec![T::zero(); width], &[width])?,
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], T::one()),
            momentum,
            epsilon,
        })
    }

    pub fn width(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Normalises with batch statistics (biased variance) and folds them
    /// into the running estimates (unbiased variance).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let n = x.shape()[0];
        if n < 2 {
            return Err(Error::contract("train-mode batchnorm needs a batch of at least 2"));
        }
        let mean = x.mean_axis(0)?;
        let centred = x.sub(&mean)?;
        let var = centred.mul(&centred)?.mean_axis(0)?;
        let inv_std = var.add_scalar(T::lit(self.epsilon)).sqrt()?.recip()?;
        let y = centred.mul(&inv_std)?.mul(&self.gamma)?.add(&self.beta)?;

        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let unbias = T::lit(n as f64 / (n as f64 - 1.0));
        {
            let bm = mean.data();
            let mut rm = self.running_mean.data_mut();
            rm.iter_mut().zip(bm.iter()).for_each(|(r, v)| *r = keep * *r + m * *v);
        }
        {
            let bv = var.data();
            let mut rv = self.running_var.data_mut();
            rv.iter_mut()
                .zip(bv.iter())
                .for_each(|(r, v)| *r = keep * *r + m * *v * unbias);
        }
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let inv_std: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::lit(self.epsilon)).sqrt())
            .collect();
        let inv_std = Tensor::new(inv_std, &[self.width()])?;
        x.sub(&self.running_mean)?
            .mul(&inv_std)?
            .mul(&self.gamma)?
            .add(&self.beta)
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.width() {
            return Err(Error::dim("batchnorm", x.shape(), &[self.width()]));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm<T> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>) {
        push(out, prefix, "gamma", &self.gamma, ParamRole::BnGamma);
        push(out, prefix, "beta", &self.beta, ParamRole::BnBeta);
        push(out, prefix, "running_mean", &self.running_mean, ParamRole::RunningMean);
        push(out, prefix, "running_var", &self.running_var, ParamRole::RunningVar);
    }
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p_drop` and survivors are scaled by `1/(1 − p_drop)`.
pub fn dropout_forward<T: Scalar>(
    p_drop: f64,
    x: &Tensor<T>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::contract(format!("dropout rate {p_drop} outside [0, 1)")));
    }
    if mode == Mode::Eval || p_drop == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::lit(1.0 / (1.0 - p_drop));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.uniform() < p_drop { T::zero() } else { keep })
        .collect();
    x.mul(&Tensor::new(mask, x.shape())?)
}

// ---------------------------------------------------------------------------
// Maxout

/// Elementwise maximum over the outputs of `k ≥ 2` affine pieces. Ties go to
/// the lowest piece index, which is also where the gradient flows.
pub fn maxout_forward<T: Scalar>(pieces: &[LinearLayer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let first = pieces
        .first()
        .filter(|_| pieces.len() >= 2)
        .ok_or_else(|| Error::contract("maxout needs at least two pieces"))?;
    for p in &pieces[1..] {
        if p.weight.shape() != first.weight.shape() {
            return Err(Error::dim("maxout", first.weight.shape(), p.weight.shape()));
        }
    }
    let mut out = first.forward(x)?;
    for p in &pieces[1..] {
        out = out.max2(&p.forward(x)?)?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Maxout<T: Scalar> {
    pub pieces: Vec<LinearLayer<T>>,
}

impl<T: Scalar> Maxout<T> {
    pub fn new(in_width: usize, out_width: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if k < 2 {
            return Err(Error::contract("maxout needs at least two pieces"));
        }
        let pieces = (0..k)
            .map(|_| LinearLayer::new(in_width, out_width, rng))
            .collect::<Result<_>>()?;
        Ok(Maxout { pieces })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        maxout_forward(&self.pieces, x)
    }

    pub fn out_width(&self) -> usize {
        self.pieces[0].out_width()
    }
}

impl<T: Scalar> Parameterized<T> for Maxout<T> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>) {
        for (i, p) in self.pieces.iter().enumerate() {
            p.visit_params(&format!("{prefix}.piece{i}"), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Max-norm

/// Rescales, in place, every row of the `[out×in]` leaf whose Euclidean norm
/// exceeds `c` so that its norm is exactly `c`.
pub fn max_norm_project<T: Scalar>(weight: &Tensor<T>, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::contract(format!("max-norm bound must be positive, got {c}")));
    }
    if weight.rank() != 2 {
        return Err(Error::dim("max_norm_project", weight.shape(), &[]));
    }
    let cols = weight.shape()[1];
    let mut data = weight.data_mut();
    for row in data.chunks_exact_mut(cols) {
        let norm = row
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt();
        if norm > c {
            let s = T::lit(c / norm);
            row.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    Ok(())
}
