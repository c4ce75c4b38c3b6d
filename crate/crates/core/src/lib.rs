//! Stochastic clamped-free beam with time-dependent tension: discrete
//! energy space, generator and propagator, Q-Wiener noise, mild-solution
//! stepping with ensemble statistics, and the command layer of the binary.

// `!(x > 0.0)` is used throughout to reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod noise;
pub mod operators;
pub mod propagator;
pub mod solver;
pub mod space;

pub use error::{Error, Result};
