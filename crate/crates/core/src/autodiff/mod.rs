//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod check;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use params::{clip_grad_norm, Adam, Bound, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
