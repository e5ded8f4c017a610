//! Feed-forward 4D driving-scene synthesis at desk scale.
//!
//! A rectified-flow model generates multi-modal latents (RGB, depth, dynamic
//! mask), a decoder turns them into pixel-aligned 3D Gaussians, static and
//! dynamic Gaussians are aggregated into a 4D scene, and a tile-based
//! splatting rasterizer renders it along laterally shifted ego trajectories.
//! A second flow model refines those renders.

pub mod conditions;
pub mod decoder;
pub mod flow;
pub mod format;
pub mod gaussians;
pub mod geometry;
pub mod kv;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod synthdata;
