//! Kernel geometry: 3D covariance from rotation and scale, first-order (EWA)
//! projection to pixel space, and the adjoints of both.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::RasterError;
use crate::camera::{Camera, CameraError};

/// Added to the diagonal of every projected covariance (pixels²).
pub const LOW_PASS_DILATION: f64 = 0.3;

pub fn quat_to_rotmat(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn normalized(q: [f64; 4]) -> Result<([f64; 4], f64), RasterError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= 1e-12) {
        return Err(RasterError::DegenerateQuaternion { norm });
    }
    Ok((q.map(|v| v / norm), norm))
}

/// `Σ = R · diag(exp(2·log_scale)) · Rᵀ` with `R` from the normalized quaternion.
pub fn compute_cov3d(rotation: [f64; 4], log_scale: [f64; 3]) -> Result<Matrix3<f64>, RasterError> {
    let (q, _) = normalized(rotation)?;
    let m = quat_to_rotmat(q) * Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    Ok(m * m.transpose())
}

/// Pinhole Jacobian of the pixel coordinates with respect to the camera-space point.
pub fn pinhole_jacobian(camera: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz2, 0.0, fy * iz, -fy * p.y * iz2)
}

/// Projected covariance before dilation: `J·W·Σ·Wᵀ·Jᵀ`.
pub fn project_cov2d_raw(
    camera: &Camera,
    p_cam: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
) -> Result<Matrix2<f64>, CameraError> {
    if p_cam.z <= 0.0 {
        return Err(CameraError::BehindCamera { depth: p_cam.z });
    }
    let t = pinhole_jacobian(camera, p_cam) * camera.rotation;
    Ok(t * cov3d * t.transpose())
}

/// Projected pixel-space covariance of a kernel at world position `mean`,
/// including the low-pass dilation.
pub fn project_cov2d(camera: &Camera, mean: &Vector3<f64>, cov3d: &Matrix3<f64>) -> Result<Matrix2<f64>, CameraError> {
    let p = camera.world_to_camera(mean);
    Ok(project_cov2d_raw(camera, &p, cov3d)? + Matrix2::identity() * LOW_PASS_DILATION)
}

/// Adjoint of [`project_cov2d_raw`]: maps the gradient with respect to the
/// 2D covariance (full-matrix convention) to gradients with respect to the
/// camera-space point and the 3D covariance.
pub fn cov2d_backward(
    camera: &Camera,
    p: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
    d_cov2d: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let w = camera.rotation;
    let t = pinhole_jacobian(camera, p) * w;
    let d_cov3d = t.transpose() * d_cov2d * t;
    let d_t = (d_cov2d + d_cov2d.transpose()) * t * cov3d;
    let d_j = d_t * w.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let d_p = Vector3::new(
        d_j[(0, 2)] * (-fx * iz2),
        d_j[(1, 2)] * (-fy * iz2),
        d_j[(0, 0)] * (-fx * iz2)
            + d_j[(0, 2)] * (2.0 * fx * p.x * iz3)
            + d_j[(1, 1)] * (-fy * iz2)
            + d_j[(1, 2)] * (2.0 * fy * p.y * iz3),
    );
    (d_p, d_cov3d)
}

/// Adjoint of [`compute_cov3d`]: gradients with respect to the raw
/// (unnormalized) quaternion and the log scales.
pub fn cov3d_backward(
    rotation: [f64; 4],
    log_scale: [f64; 3],
    d_cov3d: &Matrix3<f64>,
) -> Result<([f64; 4], [f64; 3]), RasterError> {
    let (q, norm) = normalized(rotation)?;
    let r = quat_to_rotmat(q);
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    let d_m = (d_cov3d + d_cov3d.transpose()) * m;

    let mut d_log_scale = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for j in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += d_m[(i, j)] * r[(i, j)];
            d_r[(i, j)] = d_m[(i, j)] * s[j];
        }
        d_log_scale[j] = ds * s[j];
    }

    let [w, x, y, z] = q;
    let g = |i: usize, j: usize| d_r[(i, j)];
    let d_qn = [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ];
    let dot: f64 = (0..4).map(|i| d_qn[i] * q[i]).sum();
    let d_q = [0, 1, 2, 3].map(|i| (d_qn[i] - q[i] * dot) / norm);
    Ok((d_q, d_log_scale))
}

/// Eigenvalue-based footprint radius: `ceil(3·sqrt(λ_max))` pixels.
pub fn footprint_radius(cov: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    (3.0 * lambda_max.sqrt()).ceil()
}
