//! Variational neural temporal point processes.
//!
//! Event-sequence data, Hawkes simulation, the transformer encoder, the
//! variational model with its training objective, next-event prediction,
//! parametric Hawkes baselines and evaluation metrics.

pub mod baselines;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod hawkes;
pub mod model;
pub mod objective;
pub mod predict;
pub mod rng;

pub use tpp_autodiff;
