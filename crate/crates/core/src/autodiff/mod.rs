//! Reverse-mode differentiation over dense 2-D `f64` tensors.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{AdamConfig, Checkpoint, Init, NamedArray, OptimizerState, ParamStore, CHECKPOINT_SCHEMA_VERSION};
pub use tape::{Grads, IndexSets, Reduction, Tape, Var};
pub use tensor::Tensor;
