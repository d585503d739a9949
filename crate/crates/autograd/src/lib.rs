//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! The engine is CPU-only and fully deterministic: every gradient function is
//! itself expressed in terms of engine operations, so gradients are ordinary
//! graph nodes and can be differentiated again. That property is what lets a
//! Wasserstein critic train through a gradient penalty term without an
//! external framework.
//!
//! Randomness never comes from global state; constructors that sample take an
//! explicit `rand` RNG so callers control seeding and replay.

pub mod conv;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use optim::Adam;
pub use tensor::{grad, grad_accumulate, Tensor};
