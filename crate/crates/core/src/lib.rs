pub mod autograd;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod networks;
pub mod physics;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
