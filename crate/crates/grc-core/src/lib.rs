//! Dual-branch LiDAR semantic segmentation with geometry/reflectance
//! separation, a variational complementarity constraint, and multi-level
//! feature fusion, built on a self-contained f64 autodiff engine.

pub mod cic;
pub mod error;
pub mod fusion;
pub mod lidar;
pub mod metrics;
pub mod model;
pub mod train;
pub mod verify;
pub mod voxel;
pub mod params;
pub mod range;
pub mod rng;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
