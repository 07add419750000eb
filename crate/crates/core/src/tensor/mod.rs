//! Dense tensors, the recording tape, and the finite-difference oracle.

mod dense;
mod finite_diff;
mod tape;

pub use dense::{scaled_softmax_rows, Tensor, MIN_ROW_NORM};
pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use tape::{kl_divergence, Tape, Var, DISTRIBUTION_TOLERANCE};

pub(crate) use dense::dot;
