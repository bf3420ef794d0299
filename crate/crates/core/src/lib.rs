//! Language-guided land-cover classification from co-registered
//! hyperspectral and LiDAR rasters.

pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
