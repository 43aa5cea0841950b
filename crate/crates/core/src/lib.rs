//! Class-imbalance mitigation for small-image CNN classifiers.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
