//! Numerical laboratory for joint small-noise, large-time large deviations
//! of diffusions: Freidlin-Wentzell action minimization over periodic
//! paths, Gallavotti-Cohen rate functions and rare-event Monte Carlo.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod action;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod optimize;
pub mod paths;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
