//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitives as they execute; [`Tape::backward`]
//! replays them in reverse. Only the kernels the graph models need are
//! provided: matmul, broadcasting add/sub/mul, the activations, row
//! gather, segment sums, concatenation and softmax cross-entropy.

mod check;
mod tape;

pub use check::gradient_check;
pub(crate) use tape::log_softmax;
pub use tape::{segment_sum_forward, sigmoid, softplus_shifted, Gradients, Tape, Var};
