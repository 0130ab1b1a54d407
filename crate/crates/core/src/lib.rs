//! Task-incremental rehearsal learning.
//!
//! A shared dense trunk feeds one classifier head per task. Old tasks are
//! rehearsed from a small episodic memory, trained jointly with the current
//! task under a cross-domain softmax (optionally with two-level angular
//! margins), and anchored by distilling their stored trunk representations.
//! The [`metrics`] module scores the resulting accuracy matrices.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
