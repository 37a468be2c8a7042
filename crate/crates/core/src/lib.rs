//! Deconfounding actor-critic toolkit.
//!
//! * [`numerics`]: reverse-mode autodiff, Gaussian helpers, Adam.
//! * [`causal`]: exact discrete backdoor queries and Simpson checks.
//! * [`envs`]: confounded benchmark generators and the dataset format.
//! * [`model`]: the sequential latent-variable model and its bounds.
//! * [`deconfound`]: interventional and conditional reward estimates.
//! * [`agents`]: actor-critic training and evaluation.

pub mod agents;
pub mod causal;
pub mod deconfound;
pub mod envs;
pub mod model;
pub mod numerics;
