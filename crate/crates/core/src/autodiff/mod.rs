//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod fastmath;
mod tape;
mod tensor;

pub use adam::Adam;
pub use tape::{sigmoid, BatchNormStats, Gradients, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
