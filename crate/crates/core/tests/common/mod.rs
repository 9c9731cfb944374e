//! Test-only oracles shared by the integration suites.

#![allow(dead_code)]

use mvgs::raster::{forward_render, RenderSettings};
use mvgs::{Camera, GaussianCloud, ImageBuffer};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Camera orbiting the origin at distance 2.5, 32×32.
pub fn gradient_camera(seed: u64) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let z: f64 = rng.random_range(-0.6..0.6);
    let r = (1.0 - z * z).sqrt();
    let eye = Vector3::new(r * theta.cos(), r * theta.sin(), z) * 2.5;
    Camera::look_at(
        eye,
        Vector3::zeros(),
        Vector3::z(),
        36.0,
        34.0,
        15.5,
        16.0,
        32,
        32,
        0.01,
    )
    .unwrap()
}

/// Random scene of `n` kernels near the origin with SH degree `degree`.
pub fn gradient_scene(seed: u64, n: usize, degree: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::empty(degree);
    for _ in 0..n {
        let pos = [0; 3].map(|_| rng.random_range(-0.35..0.35));
        let rot = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let ls = [0; 3].map(|_| rng.random_range(-2.6..-1.6));
        let coeffs: Vec<f64> = (0..cloud.coeffs_per_kernel())
            .map(|k| {
                if k < 3 {
                    rng.random_range(-0.8..0.8)
                } else {
                    rng.random_range(-0.3..0.3)
                }
            })
            .collect();
        cloud.push(pos, rot, ls, rng.random_range(-1.5..1.0), &coeffs);
    }
    cloud
}

pub fn random_upstream(seed: u64, w: usize, h: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_vec(w, h, (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Mutable access to the `k`-th scalar parameter in a fixed flat order:
/// positions, rotations, log scales, opacity logits, color coefficients.
pub fn param_mut(cloud: &mut GaussianCloud, mut k: usize) -> &mut f64 {
    let n = cloud.len();
    if k < 3 * n {
        return &mut cloud.positions[k / 3][k % 3];
    }
    k -= 3 * n;
    if k < 4 * n {
        return &mut cloud.rotations[k / 4][k % 4];
    }
    k -= 4 * n;
    if k < 3 * n {
        return &mut cloud.log_scales[k / 3][k % 3];
    }
    k -= 3 * n;
    if k < n {
        return &mut cloud.opacity_logits[k];
    }
    k -= n;
    &mut cloud.color_coeffs[k]
}

pub fn param_count(cloud: &GaussianCloud) -> usize {
    cloud.len() * 11 + cloud.color_coeffs.len()
}

/// `sum(upstream ∘ render(cloud))`.
pub fn linear_objective(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    upstream: &ImageBuffer,
) -> f64 {
    let (img, _) = forward_render(cloud, camera, settings).unwrap();
    img.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
}

/// Central finite differences of [`linear_objective`] for every parameter.
pub fn finite_difference_gradient(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    upstream: &ImageBuffer,
    step: f64,
) -> Vec<f64> {
    (0..param_count(cloud))
        .map(|k| {
            let mut plus = cloud.clone();
            *param_mut(&mut plus, k) += step;
            let mut minus = cloud.clone();
            *param_mut(&mut minus, k) -= step;
            (linear_objective(&plus, camera, settings, upstream) - linear_objective(&minus, camera, settings, upstream))
                / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            checked: self.checked + other.checked,
            passed: self.passed + other.passed,
            worst: self.worst.max(other.worst),
        }
    }

    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Compares analytic against numerical gradients for entries whose magnitude
/// exceeds `floor` in either.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], floor: f64, rel_tol: f64) -> GradCheck {
    let mut check = GradCheck::default();
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale <= floor {
            continue;
        }
        let rel = (a - n).abs() / scale;
        check.checked += 1;
        if rel <= rel_tol {
            check.passed += 1;
        }
        check.worst = check.worst.max(rel);
    }
    check
}
