//! Failure discovery for a "true" dynamical system under a strict
//! demonstration budget.
//!
//! The pipeline has three stages:
//!
//! 1. [`falsify`]: exhaustive grid testing of the approximate model across a
//!    box of disturbance levels, labelling every grid point as an
//!    algorithmic failure, a disturbance failure, or safe.
//! 2. [`flow`] and [`sampler`]: an invertible-flow classifier separates the
//!    model-risk region from the rest; Metropolis-Hastings in its latent
//!    space draws high-coverage points that the model considers safe, and
//!    k-means picks the initial true-system demonstrations.
//! 3. [`gpr`]: a Gaussian-process risk predictor fitted on model and
//!    true-system data, refined by sequential max-min demonstrations.
//!
//! [`pipeline`] wires the stages together with on-disk artifacts.

// `!(a < b)` is deliberate throughout: a NaN lands on the failing side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod coverage;
pub mod domain;
pub mod error;
pub mod falsify;
pub mod flow;
pub mod gpr;
pub mod kmeans;
pub mod pipeline;
pub mod rng;
pub mod sampler;

pub use domain::{
    Bounds, Budget, DisturbanceBox, DisturbanceLevel, EnvPoint, Normalizer, RiskSample, RiskSpec, Rollout, Source,
};
pub use error::{Error, Result};
