//! Seeded randomness and the Laplace family used for variational weights.

mod laplace;
mod rng;

pub use laplace::{
    laplace_kl, laplace_kl_tensor, laplace_log_prob, laplace_log_prob_tensor, laplace_noise,
    laplace_sample, softplus, softplus_inverse, LaplaceParams,
};
pub use rng::{Rng, RngState, Stream};
