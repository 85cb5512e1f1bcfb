//! Entropy-balanced agentic policy optimization at desk scale.
//!
//! The crate pairs a synthetic multi-turn tool-use world with a linear
//! softmax token policy, an entropy-guided tree rollout engine and a family
//! of clipped policy-gradient update rules (AEPO, GRPO, DAPO, CISPO, GPPO)
//! whose gradients are checked against finite differences.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f64` instantiation used by the rollout engine and trainer.

pub mod advantage;
pub mod config;
pub mod diagnostics;
pub mod encoding;
pub mod entropy;
pub mod env;
pub mod error;
pub mod policy;
pub mod rollout;
pub mod scalar;
pub mod trainer;
pub mod update;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = policy::PolicyParams<f64>;
pub type Features = policy::StateFeatures<f64>;
