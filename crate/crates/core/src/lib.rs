//! Sparsity-preserving low-rank adaptation with weight recompute and
//! reordered adapter gradients, alongside the baseline schedules it is
//! compared against, all instrumented with exact MAC and saved-element
//! counters.

pub mod adapters;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod init;
pub mod prune;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{LorsError, Result};
