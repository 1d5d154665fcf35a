//! Pseudorange-level simulation of PVT cross-authentication checks for
//! multi-constellation GNSS receivers.
//!
//! The crate covers the whole chain: synthetic scenarios with authenticated
//! and open signals, an iterative least-squares PVT solver in both clock
//! formulations, the time-based (inter-system bias) and position-based
//! consistency checks, the attack synthesizers that pass those checks, and
//! the closed-form and Monte Carlo detection statistics used to draw DET
//! curves.

// `!(x > 0.0)` style guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attacks;
pub mod checks;
pub mod coords;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod numfmt;
pub mod pvt;
pub mod scenario;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
