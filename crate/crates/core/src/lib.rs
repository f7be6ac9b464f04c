//! Training-free point cloud registration built around match-then-fuse
//! correspondence estimation.
//!
//! Two descriptor branches (a multi-view image branch and a geometric branch)
//! each produce a row-wise softmax posterior over target points. The
//! posteriors are fused per pair (Noisy-AND or Noisy-OR), matched with
//! mutual nearest neighbors and fed to a spatial-compatibility robust
//! estimator that solves the rigid alignment in closed form.

pub mod bench;
pub mod correspondence;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod pose;

pub use error::{Error, Result};
