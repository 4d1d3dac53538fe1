//! Graph-aware transformer for lifting 2D skeleton keypoints to 3D.
//!
//! The crate is organized bottom-up:
//!
//! * [`graph`]: skeleton graphs, normalized adjacency, Laplacians and the
//!   Chebyshev basis.
//! * [`autodiff`]: a tape-based reverse-mode differentiator over dense tensors.
//! * [`layers`]: Chebyshev and learnable-adjacency graph convolutions,
//!   multi-head self-attention, the two residual blocks and the full model.
//! * [`training`]: loss, Adam, learning-rate schedules, the training loop and
//!   the MPJPE metric.
//! * [`data`]: pose datasets, their file format and a synthetic generator.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod rng;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use graph::{DenseMatrix, SkeletonGraph};
pub use layers::{GraFormer, ModelConfig};
