//! Compression toolkit for a weight-shared encoder-decoder: cross-layer
//! sharing, Taylor-importance sparsification and int8 post-training
//! quantization with KL, ADMM and label-free mixed-precision strategies.

pub mod admm;
pub mod amp;
pub mod calib;
pub mod error;
pub mod format;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod sparsify;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Tensor};
