//! Toy weight-shared encoder-decoder with a hand-written backward pass.
//!
//! Parameters are stored as f32; forward and backward run in f64.

mod net;
pub(crate) mod ops;
mod task;
mod train;

pub use net::{Example, ForwardHooks, LinearInfo, Model, ModelConfig, Param, ParamRole, TrainStep};
pub use task::{accuracy, accuracy_with, generate, Accuracy, TaskKind};
pub use train::{apply_mask, prune_magnitude, train, TrainConfig, TrainReport};
