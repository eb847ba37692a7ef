//! Sparse-to-dense depth completion in two stages.
//!
//! A small network first lifts a sparse point cloud to a coarse dense
//! topology using only geometry; a second network then refines that estimate
//! with the image, trained without ground truth from photometric
//! reprojection, agreement with the sparse points, smoothness and a prior
//! tying the output to the first stage's topology.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod sampling;
pub mod scenegen;
pub mod seed;
pub mod spp;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
