//! Dense tensors, a recording tape for reverse-mode gradients, and Adam.

mod adam;
mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use ops::{weighted_l1_value, Op};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use ops::{matmul_unchecked, pairwise_sq_dist};
