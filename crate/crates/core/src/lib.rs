//! Momentum-contrastive training for paired two-modality data on a single
//! machine: a small reverse-mode autodiff core, EMA key encoders with key
//! queues, momentum self-distillation losses, gradient-accumulated batch
//! enlargement, and the surrounding data, training and evaluation plumbing.

pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod losses;
pub mod model;
pub mod momentum;
pub mod rfbe;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
