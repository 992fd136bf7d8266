//! Simulation and limit-law checks for critical age-dependent branching Markov processes.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod engine;
pub mod genealogy;
pub mod loglaplace;
pub mod model;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod superprocess;
pub mod verify;

pub use scalar::Real;

pub type GridSpecF64 = loglaplace::GridSpec<f64>;
pub type GridSpecF32 = loglaplace::GridSpec<f32>;
pub type GridSolutionF64 = loglaplace::GridSolution<f64>;
pub type GridSolutionF32 = loglaplace::GridSolution<f32>;
