//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The primitive set is deliberately small: what a causal self-attention
//! encoder and a point-process likelihood need, nothing more. Parameters
//! live in a [`ParamStore`]; a [`Tape`] records one forward pass and is
//! consumed by [`Tape::backward`].

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{Checkpoint, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
