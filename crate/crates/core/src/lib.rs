//! Homotopy-based data assimilation for drift-diffusion processes.
//!
//! An ensemble of interacting particles is transported from the prior to the
//! Bayesian posterior over one assimilation window by adding an ensemble
//! Kalman style constant-gain control to the model drift. The crate also
//! ships the exact Gaussian oracles, an ensemble square-root filter and a
//! bootstrap particle filter diagnostic used for comparison, plus the
//! scenario presets and twin-experiment drivers.

// Negated comparisons below deliberately reject NaN parameters.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod control;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod integrators;
pub mod linalg;
pub mod models;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
