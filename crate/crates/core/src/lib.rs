//! Deep heteroskedastic regression with post-hoc linear variance heads.
//!
//! A small dense MLP is trained for the mean; variance estimators are then
//! fitted on hold-out data over its hidden representations, either one
//! layer at a time, on all layers jointly, or as an equal-mean mixture of
//! single-layer heads. End-to-end baselines (Gaussian NLL, natural
//! parameterisation, β-NLL, faithful) and a metric suite are included.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod optim;
pub mod posthoc;

pub use error::{Error, Result};
