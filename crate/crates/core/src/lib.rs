//! Decomposed linear dynamical systems with probabilistic inference.
//!
//! This crate implements two models of high-dimensional time series whose
//! dynamics are a sparse, time-varying combination of dictionary operators:
//!
//! * a probabilistic model with a slow additive offset, hierarchical
//!   sparsity variables, and variational EM inference ([`learning::fit`]);
//! * the original point-estimate baseline driven by a sequential basis
//!   pursuit objective ([`baseline`]).
//!
//! Synthetic benchmark generators and the evaluation metrics used to compare
//! the two live in [`datagen`] and [`metrics`]; [`io`] holds the on-disk
//! dataset and checkpoint formats consumed by the command-line harness.

pub mod baseline;
pub mod coef;
pub mod datagen;
pub mod error;
pub mod io;
pub mod learning;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod state;
pub mod testing;

pub use error::{PdldsError, Result};
pub use model::{
    compose_transition, elbo, log_joint, CoefficientPosterior, Dataset, ElboEstimate,
    GammaPosterior, ModelParameters, StatePosterior, Trial, TrialTruth,
};
pub use state::{build_tv_lds, estimate_offsets, kalman_smooth, TimeVaryingLDS};
