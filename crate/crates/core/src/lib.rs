//! In-network learning: distributed training and inference where several
//! encoder nodes and one fusion node exchange activations and error slices,
//! with federated and split learning baselines and exact bandwidth metering.

pub mod bandwidth;
pub mod baselines;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod info;
pub mod nn;
pub mod protocol;
pub mod stack;
pub mod tensor;
pub mod vloss;

pub use error::{Error, Result};
pub use tensor::Tensor;
