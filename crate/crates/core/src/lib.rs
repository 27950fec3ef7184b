//! Learning-curve theory for the signal-plus-noise feature model, together with
//! finite-width ReLU network experiments that probe the variance-limited regime.
//!
//! The crate is split by concern:
//! - [`taskgen`]: polynomial targets on the sphere and Gaussian covariate sampling
//! - [`nn`]: the NTK-parameterized MLP and full-batch gradient descent
//! - [`kernels`]: infinite-width and empirical NTKs, alignment metrics, Mercer features
//! - [`regression`]: kernel ridge regression and minimum-norm interpolation
//! - [`ensemble`]: ensembling, bias/variance decomposition, the P½ finder
//! - [`theory`]: saddle-point solvers and the Monte Carlo cross-check
//! - [`cli`]: config-driven runner and persistence

pub mod blob;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod nn;
pub mod regression;
pub mod rng;
pub mod taskgen;
pub mod theory;

pub use error::{Result, VllError};
