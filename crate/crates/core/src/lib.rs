//! Sequential recommendation with semantic codes fused with text through
//! code-guided cross-attention.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod quantizer;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod textenc;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model used for training and serving.
pub type Model32 = model::CcfModel<f32>;
/// Double-precision model used for gradient checks.
pub type Model64 = model::CcfModel<f64>;
