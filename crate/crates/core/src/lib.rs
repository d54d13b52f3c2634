//! Simulation laboratory for amortized Bayesian inference on synthetic
//! regression tasks: permutation-invariant neural estimators, a conditional
//! flow-matching posterior sampler, classical baselines and exact oracles,
//! and a seeded experiment harness that persists results as CSV.

pub mod error;
pub mod estimators;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
