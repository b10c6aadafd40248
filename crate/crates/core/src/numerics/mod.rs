//! Dense tensors and reverse-mode differentiation.

pub mod kernels;
pub mod resample;
pub mod tape;
pub mod tensor;

pub use resample::ResizePlan;
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
