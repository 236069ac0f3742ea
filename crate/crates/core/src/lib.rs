//! Learning a nonlinear identity/expression face model from unorganized
//! point clouds while putting every scan into dense correspondence with a
//! fixed-topology template.

pub mod autonet;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod preprocess;
pub mod spatial;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{PointCloud, Template, TriMesh, Vec3};
