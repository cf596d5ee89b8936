//! Equilibria, linear stability and explicit stability criteria for
//! networks of droop-controlled inverters.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod criteria;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod linearization;
pub mod model;
pub mod ode;
pub mod parallel;
pub mod random;
pub mod simulator;
pub mod sweep;
pub mod systems;

pub use error::{Error, Result};
