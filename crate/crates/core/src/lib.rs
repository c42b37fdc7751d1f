//! Protein–ligand pose scoring with a 3D convolutional network over a
//! differentiable atom-density grid, and gradient-based local pose
//! optimization driven by that score.

pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod molecule;
pub mod network;
pub mod optimizer;
pub mod pipeline;
pub mod sampling;
pub mod corpus;
pub mod synthetic;

pub use error::{Error, Result};
