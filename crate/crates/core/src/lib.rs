//! Single-view planar rectification with a vertical 4-point homography
//! parameterization.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the scalar for the common cases.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geom;
pub mod image;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod train;
pub mod warp;

pub use error::{Error, ErrorClass, Result};
pub use geom::{
    displacement_to_homography, homography_to_displacement, rescale_homography, CornerSet, DisplacementReadout,
    DisplacementVector, Homography, Point, ScaleTransform, Side,
};
pub use image::{ImageBuffer, ValidityMask};
pub use scalar::Real;

pub type Homography64 = Homography<f64>;
pub type Homography32 = Homography<f32>;
pub type Displacement64 = DisplacementVector<f64>;
pub type Displacement32 = DisplacementVector<f32>;
pub type Image64 = ImageBuffer<f64>;
pub type Image32 = ImageBuffer<f32>;
