//! Soft-label estimation by spreading sparse noisy annotations through a
//! neighborhood-graph heat kernel.
//!
//! The pipeline: load or generate an [`dataset::EmbeddedDataset`], build a
//! [`graph::NeighborGraph`], normalize it, and feed annotations into a
//! [`session::SpreadSession`]. Estimates, confidence intervals and baseline
//! estimators work off the same annotation log.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod export;
pub mod graph;
pub mod kdtree;
pub mod matrix;
pub mod metrics;
pub mod session;
pub mod sim;
pub mod solver;
pub mod theory;
pub mod uncertainty;

pub use error::{Error, Result};
