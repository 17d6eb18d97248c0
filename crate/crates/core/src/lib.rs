#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Joint state and parameter estimation for the two-scale Lorenz96 twin
//! experiment, with the online parameter ensemble constrained by an offline
//! parameter climatology `N(theta_c, C)`.
//!
//! The crate is organised bottom-up:
//!
//! * [`models`]: two-scale (truth) and single-scale (forecast) Lorenz96 and RK4.
//! * [`synth`]: nature run, synthetic observations and autocorrelation indices.
//! * [`surrogate`]: Matérn-5/2 Gaussian-process surrogate of the index map.
//! * [`batchopt`]: Metropolis–Hastings sampling through the surrogate and the
//!   Gaussian climatology fit.
//! * [`enkf`]: augmented-state LETKF with localization and inflation.
//! * [`hoope`]: pseudo-observation and regression-to-climatology constraints,
//!   plus closed-form moment oracles.
//! * [`harness`]: experiment configuration, twin-experiment driver, sweeps and
//!   metrics.

pub mod batchopt;
pub mod enkf;
pub mod error;
pub mod harness;
pub mod hoope;
pub mod linalg;
pub mod models;
pub mod surrogate;
pub mod synth;

pub use error::{Error, Result};
