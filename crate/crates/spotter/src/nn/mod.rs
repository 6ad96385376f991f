//! Numeric building blocks for the spatial encoder: convolution,
//! batch normalization, and the Adam optimizer.

pub mod adam;
pub mod batchnorm;
pub mod conv;
