//! Spatial-deformation data poisoning for radiance fields.
//!
//! The crate contains everything needed to run the attack end to end at
//! desk scale: a reverse-mode tape ([`autodiff`]), image and flow-field
//! containers with PSNR/SSIM ([`imaging`]), the differentiable bilinear
//! warper ([`warp`]), cameras and a synthetic scene generator ([`scene`]),
//! two radiance-field backends ([`field`]), the volume renderer
//! ([`render`]), optimizers and field fitting ([`train`]), and the bi-level
//! poisoning loop ([`poison`]).

pub mod autodiff;
pub mod error;
pub mod field;
pub mod imaging;
pub mod par;
pub mod poison;
pub mod render;
pub mod scene;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
