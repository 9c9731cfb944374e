//! Seeded synthetic scenes: a random ground-truth cloud photographed from
//! cameras spread over a sphere.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::camera::Camera;
use crate::cloud::{logit, GaussianCloud};
use crate::raster::sh::rgb_to_dc;
use crate::raster::{forward_render, RenderSettings};

pub const CAMERA_RADIUS: f64 = 3.0;
pub const SYNTH_NEAR: f64 = 0.01;

/// `count` points spread evenly over a sphere of `radius`.
pub fn fibonacci_sphere(count: usize, radius: f64) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), y, r * phi.sin()) * radius
        })
        .collect()
}

/// Pinhole camera at `eye` looking at the origin with `fx = fy = 0.9·size`.
pub fn orbit_camera(eye: Vector3<f64>, size: u32) -> Camera {
    let forward = -eye.normalize();
    let up = if forward.y.abs() > 0.99 {
        Vector3::z()
    } else {
        -Vector3::y()
    };
    let f = 0.9 * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    Camera::look_at(eye, Vector3::zeros(), up, f, f, c, c, size, size, SYNTH_NEAR).expect("orbit cameras are valid")
}

fn random_kernel_cloud(rng: &mut ChaCha8Rng, kernels: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::empty(0);
    let (lo, hi) = (0.01f64.ln(), 0.05f64.ln());
    for _ in 0..kernels {
        let position = loop {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break p;
            }
        };
        let rotation = loop {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                break q.map(|v| v / n);
            }
        };
        let log_scale = std::array::from_fn(|_| rng.random_range(lo..=hi));
        let opacity = rng.random_range(0.6..=0.95);
        let rgb: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        cloud.push(position, rotation, log_scale, logit(opacity), &rgb.map(rgb_to_dc));
    }
    cloud
}

/// Returns the ground-truth cloud and its rendered dataset. The last
/// `heldout` cameras form the evaluation split.
pub fn generate_synthetic_scene(
    seed: u64,
    kernels: usize,
    cameras: usize,
    size: u32,
    heldout: usize,
) -> (GaussianCloud, Dataset) {
    assert!(kernels >= 1, "at least one kernel");
    assert!(cameras >= heldout + 2, "need two more cameras than held-out views");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_kernel_cloud(&mut rng, kernels);
    let cams: Vec<Camera> = fibonacci_sphere(cameras, CAMERA_RADIUS)
        .into_iter()
        .map(|eye| orbit_camera(eye, size))
        .collect();
    let settings = RenderSettings::default();
    let images = cams
        .iter()
        .map(|c| forward_render(&cloud, c, &settings).expect("ground truth renders").0)
        .collect();
    let dataset = Dataset::new(
        format!("synthetic-{seed}"),
        cams,
        images,
        (cameras - heldout..cameras).collect(),
    );
    (cloud, dataset)
}
