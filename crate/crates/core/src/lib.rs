//! Factorised neural relational inference.
//!
//! Physics simulators for multi-interaction particle systems, the NRI,
//! factorised (fNRI) and sigmoid-factorised (sfNRI) encoder/decoder models
//! on a small reverse-mode autodiff core, their training objectives, and
//! permutation-matched evaluation.

pub mod autodiff;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod optim;
pub mod scheme;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
