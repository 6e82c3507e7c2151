pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod optimizers;
pub mod random;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
