//! Uncertainty scoring for language model generation traces.
//!
//! The crate turns recorded generation traces into scalar uncertainty
//! scores (larger means more uncertain), calibrates and evaluates them
//! against correctness labels, and combines them into ensembles. Model
//! access goes through the [`backend::Backend`] trait; a deterministic
//! mock and a record/replay wrapper keep everything testable offline.

pub mod backend;
pub mod cli;
pub mod eigen;
pub mod ensemble;
pub mod error;
pub mod longform;
pub mod metrics;
pub mod scorers;
pub mod similarity;
pub mod trace;
pub mod transforms;

pub use error::{Error, Result};
pub use scorers::{Method, ScoreEngine, ScorerConfig};
pub use trace::{UncertaintyScore, UncertaintyTrace, SATURATED};
