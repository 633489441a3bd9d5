//! Minimal dense neural-network kernel with hand-written reverse passes:
//! 3x3 convolution, batch normalization, ReLU and Adam.

pub mod adam;
pub mod batchnorm;
pub mod cnn;
pub mod conv;
pub mod relu;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testing;

pub use adam::{Adam, AdamConfig};
pub use batchnorm::{BatchNorm2d, BnBatchStats, BnMode};
pub use cnn::{CnnGrads, StageCnn};
pub use conv::Conv2d;
pub use tensor::Tensor;
