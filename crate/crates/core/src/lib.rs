//! CPU deep-learning engine and training harness for two-channel PET-CT
//! survival classification with an FCN preprocessor and an aggregated
//! residual classifier.

pub mod autograd;
pub mod datapipe;
pub mod error;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
