//! Noise-robust classification of variable-length multi-lead ECG recordings.
//!
//! The crate bundles a small reverse-mode autodiff engine, a masked 1D CNN,
//! L-infinity PGD and white-noise attacks, three robust training objectives
//! (adversarial training, Jacobian regularization, noise-to-signal-ratio
//! regularization) and a noise-sweep evaluation harness.

pub mod attacks;
pub mod autograd;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod model;
mod seed;

pub use error::{Error, Result};
pub use seed::derive_seed;
