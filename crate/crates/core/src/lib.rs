//! Training-free lifting of 2D open-vocabulary segmentation into labeled 3D
//! instances.

pub mod backends;
pub mod config;
pub mod dsu;
pub mod error;
pub mod eval;
pub mod geometry;
mod knn;
pub mod labeling;
pub mod mask;
pub mod merging;
pub mod overlap;
pub mod pipeline;
pub mod scene_io;
pub mod superpoints;
pub mod synthbench;

pub use error::{Error, Result};
