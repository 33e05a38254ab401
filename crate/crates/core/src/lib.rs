//! Self-supervised identity clustering for single-video animal detections.
//!
//! Given per-detection embeddings and the number of individuals, a small
//! projection head is trained with contrastive objectives whose positives
//! come from Hungarian matching between frames; all detections are then
//! clustered with k-means and scored against ground truth when available.

pub mod assign;
pub mod batching;
pub mod checkpoint;
pub mod cli;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod head;
pub mod objective;
pub mod optim;
pub mod parallel;
pub mod real;
pub mod seed;
pub mod simulate;
pub mod store;
pub mod train;

pub use error::{Error, Result};
pub use parallel::Exec;
pub use real::Real;
