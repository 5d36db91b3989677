//! Multi-marginal stochastic flow matching.
//!
//! Learns an SDE whose marginals pass through snapshot distributions
//! observed at irregular times. Training aligns mini-batches across
//! consecutive snapshots with exact optimal-transport plans, draws
//! monotone spline means through the aligned tuples on overlapping windows,
//! and regresses a flow network and a score network onto closed-form
//! Gaussian-path targets. Trained networks are integrated with
//! Euler–Maruyama and evaluated with Wasserstein and MMD distances.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ot;
pub mod points;
pub mod probpath;
pub mod sim;
pub mod spline;
pub mod trainer;

pub use error::{Error, Result};
pub use points::Points;
