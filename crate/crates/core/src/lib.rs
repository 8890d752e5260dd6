//! Inter-task affinity for multi-task training.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: small multi-task models (quadratic tasks, linear and tanh-MLP
//!   trunks with linear heads) with exact losses and hand-written gradients.
//! * [`data`]: seeded synthetic task sets with a planted cluster structure.
//! * [`probe`]: SGD training with the lookahead affinity probe.
//! * [`affinity`]: aggregation of per-step samples into a training-level matrix.
//! * [`selector`]: budgeted network selection (exhaustive oracle and branch-and-bound).
//! * [`theory`]: executable checks of the convex-setting results and the quadratic counterexample.
//! * [`bench`]: end-to-end grouping pipelines, baselines and reports.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod affinity;
pub mod bench;
pub mod data;
pub mod error;
pub mod hashing;
pub mod model;
pub mod probe;
pub mod rng;
pub mod selector;
pub mod theory;

pub use error::{Result, TagError};
