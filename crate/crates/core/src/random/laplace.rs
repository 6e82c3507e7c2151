use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Laplace distribution with location `loc` and scale `scale > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceParams {
    loc: f64,
    scale: f64,
}

impl LaplaceParams {
    pub fn new(loc: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !loc.is_finite() {
            return Err(Error::domain(format!(
                "Laplace needs finite loc and scale > 0, got ({loc}, {scale})"
            )));
        }
        Ok(LaplaceParams { loc, scale })
    }

    pub fn loc(&self) -> f64 {
        self.loc
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mean(&self) -> f64 {
        self.loc
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.scale * self.scale
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.loc) / self.scale;
        if z < 0.0 {
            0.5 * z.exp()
        } else {
            1.0 - 0.5 * (-z).exp()
        }
    }
}

/// Standard Laplace variate from `u ∈ (−½, ½)` by inverse CDF:
/// `−sign(u)·ln(1 − 2|u|)`.
pub fn laplace_noise(u: f64) -> Result<f64> {
    if !(u > -0.5 && u < 0.5) {
        return Err(Error::domain(format!("uniform draw {u} outside (-1/2, 1/2)")));
    }
    let s = if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(-s * (-2.0 * u.abs()).ln_1p())
}

/// Reparameterized draw `μ + b·noise(u)`. For fixed `u` it is differentiable
/// in `(μ, b)` with `∂/∂μ = 1` and `∂/∂b = noise(u)`.
pub fn laplace_sample(p: &LaplaceParams, u: f64) -> Result<f64> {
    Ok(p.loc + p.scale * laplace_noise(u)?)
}

pub fn laplace_log_prob(p: &LaplaceParams, x: f64) -> f64 {
    -(2.0 * p.scale).ln() - (x - p.loc).abs() / p.scale
}

/// Closed-form `KL(q ‖ p)` between two Laplace distributions.
pub fn laplace_kl(q: &LaplaceParams, p: &LaplaceParams) -> f64 {
    let d = (q.loc - p.loc).abs();
    (p.scale / q.scale).ln() + d / p.scale + (q.scale / p.scale) * (-d / q.scale).exp() - 1.0
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`: `ln(eʸ − 1)`.
pub fn softplus_inverse(y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::domain(format!("softplus inverse of {y}")));
    }
    if y > 20.0 {
        Ok(y + (-(-y).exp()).ln_1p())
    } else {
        Ok(y.exp_m1().ln())
    }
}

/// `Σᵢ KL(Laplace(locᵢ, scaleᵢ) ‖ prior)` as a differentiable scalar.
///
/// At `locᵢ = prior.loc` the `|·|` kink gets subgradient 0.
pub fn laplace_kl_tensor<T: Scalar>(
    loc: &Tensor<T>,
    scale: &Tensor<T>,
    prior: &LaplaceParams,
) -> Result<Tensor<T>> {
    let inv_bp = T::lit(1.0 / prior.scale);
    let dist = loc.add_scalar(T::lit(-prior.loc)).abs();
    let ratio = dist.mul(&scale.recip()?)?;
    let tail = scale.mul(&ratio.neg().exp())?.scale(inv_bp);
    let kl = dist
        .scale(inv_bp)
        .add(&tail)?
        .sub(&scale.log()?)?
        .add_scalar(T::lit(prior.scale.ln() - 1.0));
    Ok(kl.sum())
}

/// `Σᵢ log Laplace(xᵢ; locᵢ, scaleᵢ)` as a differentiable scalar. `loc` and
/// `scale` must match `x`'s shape.
pub fn laplace_log_prob_tensor<T: Scalar>(
    x: &Tensor<T>,
    loc: &Tensor<T>,
    scale: &Tensor<T>,
) -> Result<Tensor<T>> {
    let z = x.sub(loc)?.abs().mul(&scale.recip()?)?;
    let lp = z
        .add(&scale.log()?)?
        .neg()
        .add_scalar(T::lit(-std::f64::consts::LN_2));
    Ok(lp.sum())
}
