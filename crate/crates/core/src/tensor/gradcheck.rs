use super::{no_grad, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic − central| / max(1, |analytic|)` for
/// the gradient of the scalar `f(x)` with respect to the leaf `x`.
///
/// `x` is perturbed in place and restored afterwards. A NaN anywhere makes
/// the result NaN.
pub fn grad_check<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let probe = x.clone();
    grad_check_leaves(move || f(&probe), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several leaves that `f` closes over.
pub fn grad_check_leaves<T, F>(mut f: F, leaves: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut() -> Result<Tensor<T>>,
{
    if leaves.iter().any(|l| !l.requires_grad() || !l.is_leaf()) {
        return Err(Error::contract("grad_check needs gradient-requiring leaves"));
    }
    leaves.iter().for_each(Tensor::zero_grad);
    f()?.backward()?;
    let analytic: Vec<Vec<T>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![T::zero(); l.numel()]))
        .collect();

    let step = T::lit(h);
    let mut worst = 0.0f64;
    for (leaf, grad) in leaves.iter().zip(&analytic) {
        for i in 0..leaf.numel() {
            let orig = leaf.data()[i];
            leaf.data_mut()[i] = orig + step;
            let plus = no_grad(&mut f);
            leaf.data_mut()[i] = orig - step;
            let minus = no_grad(&mut f);
            leaf.data_mut()[i] = orig;
            let (plus, minus) = (plus?.item(), minus?.item());
            let numeric = (plus - minus).to_f64().unwrap_or(f64::NAN) / (2.0 * h);
            let a = grad[i].to_f64().unwrap_or(f64::NAN);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err.is_nan() {
                return Ok(f64::NAN);
            }
            worst = worst.max(err);
        }
    }
    leaves.iter().for_each(Tensor::zero_grad);
    Ok(worst)
}
