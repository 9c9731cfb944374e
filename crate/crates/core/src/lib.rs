//! CPU implementation of multi-view regulated Gaussian splatting.
//!
//! The crate is organized bottom-up:
//!
//! - [`camera`], [`cloud`], [`image`], [`config`]: value types shared by everything else.
//! - [`raster`]: differentiable tile rasterizer (forward and analytic backward).
//! - [`loss`]: L1 + D-SSIM training loss, per-pixel loss maps, PSNR and SSIM.
//! - [`optim`]: multi-view gradient accumulation, view sampling and Adam.
//! - [`densify`]: adaptive density control, the camera-spread threshold and
//!   cross-ray overlap regions.
//! - [`pyramid`]: intrinsic-rescaled image pyramid and its schedule.
//! - [`sceneio`]: datasets, PLY checkpoints, synthetic scenes and metrics CSV.
//! - [`train`] and [`ablate`]: the training loop and the component ablation ladder.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{a} != {b} (tol {})", $tol);
    }};
}

pub mod ablate;
pub mod camera;
pub mod cloud;
pub mod config;
pub mod densify;
pub mod image;
pub mod loss;
pub mod optim;
pub mod pyramid;
pub mod raster;
pub mod sceneio;
pub mod train;

pub use camera::{Camera, CameraError};
pub use cloud::{CloudViolation, GaussianCloud};
pub use config::{Components, TrainConfig};
pub use image::ImageBuffer;
