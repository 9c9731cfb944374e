//! Pinhole camera with world-to-camera extrinsics.
//!
//! Conventions: right-handed camera frame looking down `+z`, `x` to the
//! right and `y` down in pixel space. Pixel `(i, j)` has its center at the
//! continuous coordinate `(i, j)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CameraError {
    #[error("point is behind the camera (camera-space depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid camera: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        near: f64,
    ) -> Result<Self, CameraError> {
        let camera = Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `eye` looking at `target`. `up` only disambiguates roll; the
    /// image `y` axis points away from it.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        near: f64,
    ) -> Result<Self, CameraError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| CameraError::Invalid("eye coincides with target".into()))?;
        let mut up = up;
        if forward.cross(&up).norm() < 1e-6 * up.norm().max(1e-300) {
            up = if forward.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
        }
        let down = (forward * forward.dot(&up) - up).normalize();
        let right = down.cross(&forward);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation, fx, fy, cx, cy, width, height, near)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let defect = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if !defect.is_finite() || defect > 1e-6 {
            return Err(CameraError::Invalid(format!(
                "rotation is not orthonormal (max |R^T R - I| = {defect:e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(CameraError::Invalid("rotation has negative determinant".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(CameraError::Invalid("translation is not finite".into()));
        }
        if self.width < 1 || self.height < 1 {
            return Err(CameraError::Invalid(format!(
                "image size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CameraError::Invalid("focal lengths must be positive".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(CameraError::Invalid("principal point is not finite".into()));
        }
        if !(self.near > 0.0 && self.near.is_finite()) {
            return Err(CameraError::Invalid("near plane must be positive".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Projects a world point to pixel coordinates and camera-space depth.
    pub fn project(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64), CameraError> {
        self.project_camera_space(&self.world_to_camera(point))
    }

    pub fn project_camera_space(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, f64), CameraError> {
        if p.z <= 0.0 {
            return Err(CameraError::BehindCamera { depth: p.z });
        }
        let pixel = Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy);
        Ok((pixel, p.z))
    }

    /// Camera-space point at `depth` along the ray through `pixel`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit world-space direction of the ray through `pixel`.
    pub fn pixel_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        (self.rotation.transpose() * self.unproject(pixel, 1.0)).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Radius of the bounding sphere of the camera centers, centered on their mean.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 0.0;
    }
    let centroid = cameras
        .iter()
        .map(Camera::center)
        .fold(Vector3::zeros(), |acc, c| acc + c)
        / cameras.len() as f64;
    cameras
        .iter()
        .map(|c| (c.center() - centroid).norm())
        .fold(0.0, f64::max)
}
