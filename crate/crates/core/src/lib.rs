//! Linear-Gaussian filtering experiments: the exact Kalman filter, the
//! perturbed-observation ensemble Kalman filter, and coupled runs that pair
//! every EnKF ensemble with an exact-gain reference ensemble drawn from the
//! same random inputs, so that the EnKF error can be measured member by
//! member as the ensemble grows.
//!
//! Module map:
//!
//! - [`model`]: problem definition, validation, JSON model files
//! - [`kf`]: Kalman filter recursions and the gain solve
//! - [`ensemble`]: ensembles, sample statistics, keyed Gaussian draws
//! - [`rng`]: the keyed counter-based streams behind every draw
//! - [`enkf`]: EnKF step, reference ensemble, coupled runs
//! - [`experiment`]: replicated convergence studies and rate fits
//! - [`cli`]: the `enkf-lab` command line

pub mod cli;
pub mod enkf;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod format;
pub mod kf;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
