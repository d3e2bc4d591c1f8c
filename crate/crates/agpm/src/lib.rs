//! Spatial-temporal additive Gaussian process modeling of ride-sourcing
//! order-matching and passenger-pickup processes.
//!
//! The crate fits additive GP models (sums of shared-variance kernel
//! products over named covariate blocks) to gridded demand/supply panels,
//! compares them against analytical matching baselines (PMQ, SPMQ, CDMF),
//! and uses the trained model's closed-form means and input gradients to
//! design and evaluate idle-vehicle relocation strategies.

pub mod baselines;
pub mod cli;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod market;
pub mod strategy;
pub mod training;

mod error;

pub use error::{Error, Result};
