//! Video individual counting by decomposition.
//!
//! A video's pedestrian count is the count in its first sampled frame plus
//! the inflow of newcomers between consecutive sampled frames. Inflow is read
//! from an entropic optimal-transport plan between head descriptors of the two
//! frames, augmented with dust bins that absorb arrivals and departures.
//!
//! Modules:
//! - [`geometry`]: head points, density rendering, peak proposals
//! - [`descriptor`]: encoder, similarities, matching loss and its gradient
//! - [`ot`]: augmented scores, marginals, Sinkhorn and an exact LP oracle
//! - [`flow`]: soft inflow/outflow, decoding, Hungarian baseline
//! - [`simulator`]: seeded synthetic crowds with ground-truth identities
//! - [`pipeline`]: per-video counting and interval sweeps
//! - [`metrics`]: MAE / MSE / WRAE and MIAE / MOAE
//! - [`io`] and [`cli`]: file formats and the command-line surface

pub mod assignment;
pub mod cli;
pub mod descriptor;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod ot;
pub mod pipeline;
pub mod simulator;

pub use error::{Error, Result};
