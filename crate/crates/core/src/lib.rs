//! Dense color and metric depth reconstruction from sparse camera views and
//! LiDAR scans.
//!
//! Geometry (volume density) and appearance (color) are learned by two
//! disjoint networks: LiDAR rays supervise the density network, camera rays
//! supervise the color network. A learned occupancy grid, trained by
//! gradient descent from the same LiDAR rays, decides where samples are
//! placed along every ray.

pub mod cli;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod io_util;
pub mod loss;
pub mod ogm;
pub mod optim;
pub mod raster;
pub mod render;
pub mod scenedata;
pub mod trainer;

pub use error::{Error, Result};
