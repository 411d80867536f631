//! Deformable 3D Gaussian splatting with spatial and temporal
//! high-frequency emphasis losses.
//!
//! The crate is organized bottom-up:
//!
//! - [`gaussians`]: parameterization, covariance, projection, SH color.
//! - [`rasterizer`]: tiled differentiable splatting and its backward pass.
//! - [`deformation`]: HexPlane feature field and decoder MLP.
//! - [`shf`]: FFT high-pass weighting and the weighted-L1 spatial loss.
//! - [`thf`]: flow predictors, Charbonnier and census temporal loss.
//! - [`objective`]: masked L1, depth Huber, plane TV and the weighted total.
//! - [`trainer`]: two-stage optimization, densification, checkpoints.
//! - [`data_io`]: datasets, synthetic scenes, metrics, file formats.
//! - [`gradcheck`]: finite-difference verification of every backward pass.

pub mod data_io;
pub mod deformation;
pub mod error;
pub mod gaussians;
pub mod gradcheck;
pub mod image;
pub mod objective;
pub mod optim;
pub mod rasterizer;
pub mod shf;
pub mod thf;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
