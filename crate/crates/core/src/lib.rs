//! Gradient disaggregation for federated learning.
//!
//! A server running secure aggregation only sees, for every round, the sum of
//! the updates submitted by that round's participants. When the same users
//! keep submitting similar updates and the server also knows coarse
//! participation counts, the per-round sums factor as `G = P X` with a binary
//! participant matrix `P`. This crate recovers `P` column by column and then
//! the per-user updates `X` by least squares.
//!
//! The modules follow the data flow:
//!
//! * [`flsim`] simulates the federation and produces the observed sums.
//! * [`analytics`] derives the participation-count side channel.
//! * [`linalg`] holds the dense kernels (SVD, nullspace, least squares).
//! * [`solver`] searches for each binary participation column.
//! * [`attack`] wires everything together and scores the result.
//! * [`io`] reads and writes the on-disk matrix and constraint formats.

pub mod analytics;
pub mod attack;
pub mod flsim;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod solver;

#[cfg(doctest)]
pub mod book;

pub use linalg::DenseMatrix;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("batch size {batch} exceeds dataset size {dataset}")]
    BatchExceedsDataset { batch: usize, dataset: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
