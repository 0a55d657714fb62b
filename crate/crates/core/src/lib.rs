//! Observable adjustments for regularized M-estimators in single-index models.
//!
//! The pipeline is: simulate or load `(X, y)`, fit `β̂` for a convex loss plus
//! penalty, build the derivative matrix `Â` and the traces `df̂`, `tr V`, then
//! turn those into the adjusted quantities `(â², σ̂², t̂², v̂, r̂², γ̂)` and the
//! de-biased estimator used for intervals and tests.

pub mod adjust;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod inference;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod parallel;
pub mod penalty;
pub mod rng;
pub mod stats;
pub mod system;

pub use error::{Error, Result};
