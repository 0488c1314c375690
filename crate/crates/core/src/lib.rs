//! Shape-matched multi-warp virtual try-on: dataset handling, contour
//! extraction, shape matching and retrieval, k-affine warping, inpainting and
//! evaluation. Numeric code is generic over `f32`/`f64`.

pub mod config;
pub mod contour;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inpaint;
pub mod multiwarp;
pub mod raster;
pub mod retrieval;
pub mod shape_matching;
pub mod training;

pub use error::{Error, Result};
pub use shapewarp_tensor::Scalar;

pub type Image32 = raster::RgbImage<f32>;
pub type Image64 = raster::RgbImage<f64>;
pub type Mask32 = raster::GarmentMask<f32>;
pub type Mask64 = raster::GarmentMask<f64>;
pub type Smn32 = shape_matching::ShapeMatchingNet<f32>;
pub type Smn64 = shape_matching::ShapeMatchingNet<f64>;
pub type Mtn32 = inpaint::Mtn<f32>;
pub type Mtn64 = inpaint::Mtn<f64>;
