//! Debiased Robinson smooth-minimum-distance (D-RSMD) estimation of
//! heterogeneous treatment effects under a conditional moment restriction,
//! with comparison estimators, identification diagnostics and a Monte Carlo
//! harness.

pub mod error;
pub mod estimators;
pub mod identification;
pub mod kernel;
pub mod model;
pub mod numeric;
pub mod nuisance;
pub mod simulation;

pub use error::{Error, Result};
