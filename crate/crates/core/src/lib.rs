//! Scaffold-conditioned radiance fields.
//!
//! A shape decoder maps a latent code to a voxel occupancy scaffold; an
//! appearance network maps points, view directions, scaffold occupancy and an
//! appearance code to color and density. Both are trained by generative
//! latent optimization on procedural objects and inverted from one image.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod image;
pub mod inference;
pub mod io;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod nets;
pub mod parallel;
pub mod render;
pub mod selftest;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
pub use image::Image;
pub use math::{Aabb, Camera, Mat3, Ray, Vec3};
pub use nets::{LatentCode, Model};
pub use voxel::VoxelGrid;
