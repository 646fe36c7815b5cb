//! Multi-task convolutional network for joint SAR target recognition and
//! segmentation, with every layer's forward and backward pass written by hand.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub(crate) mod linalg;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::Mode;
pub use network::{MtlNetwork, NetworkConfig};
pub use rng::Rng;
pub use tensor::Tensor;
