//! Model-based context detection for non-stationary reinforcement learning.
//!
//! An agent keeps a growing library of per-context probabilistic dynamics
//! ensembles and soft actor-critic policies. Multivariate CUSUM statistics
//! over the library's predictive likelihoods decide, online, whether the
//! environment switched to a known context, to a new one, or not at all.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file fix the element type for common uses.

pub mod agent;
pub mod changepoint;
pub mod dynamics;
pub mod environments;
pub mod error;
pub mod gaussian;
pub mod nn;
pub mod policy;
pub mod replay;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases, used for gradient checks and the harness.
pub type Agent = agent::MbcdAgent<f64>;
pub type Model = dynamics::ContextModel<f64>;
pub type Policy = policy::SacPolicy<f64>;
pub type Bank = changepoint::CusumBank<f64>;
pub type Gaussian = gaussian::DiagonalGaussian<f64>;

/// Single-precision aliases for throughput-bound runs.
pub type AgentF32 = agent::MbcdAgent<f32>;
pub type ModelF32 = dynamics::ContextModel<f32>;
pub type PolicyF32 = policy::SacPolicy<f32>;
