//! Adaptive density control.
//!
//! The clone/split/prune machinery follows the usual splatting recipe. Two
//! multi-view additions steer it: the threshold is halved when the sampled
//! cameras are spread out, and halved again inside cuboids where corner rays
//! of high-loss windows from different views meet.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::Camera;
use crate::cloud::{logit, GaussianCloud};
use crate::config::{DistanceAggregate, TrainConfig};
use crate::loss::LossMap;
use crate::optim::{GradientBuffer, ResizePlan};
use crate::raster::project::quat_to_rotmat;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DensifyError {
    #[error("no camera distances to aggregate")]
    EmptyDistances,
    #[error("window {h}x{w} does not fit a {height}x{width} loss map")]
    WindowTooLarge {
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    },
}

/// Maps camera positions into the unit ball: centered on their mean and
/// scaled so the farthest lands on the unit sphere.
pub fn normalize_camera_translations(positions: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    if positions.is_empty() {
        return Vec::new();
    }
    let centroid = positions.iter().sum::<Vector3<f64>>() / positions.len() as f64;
    let radius = positions.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    if radius <= 1e-12 {
        return vec![Vector3::zeros(); positions.len()];
    }
    positions.iter().map(|p| (p - centroid) / radius).collect()
}

/// Distances over all ordered pairs `(i, j)` with `i != j`.
pub fn pairwise_distances(points: &[Vector3<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len() * points.len().saturating_sub(1));
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i != j {
                out.push((a - b).norm());
            }
        }
    }
    out
}

/// Returns `(β̂, r̄)`: the threshold is halved when the aggregated distance
/// reaches `τ` (the Heaviside step is 1 at zero).
pub fn adaptive_threshold(
    distances: &[f64],
    beta: f64,
    tau: f64,
    aggregate: DistanceAggregate,
) -> Result<(f64, f64), DensifyError> {
    if distances.is_empty() {
        return Err(DensifyError::EmptyDistances);
    }
    let r = match aggregate {
        DistanceAggregate::Mean => distances.iter().sum::<f64>() / distances.len() as f64,
        DistanceAggregate::Max => distances.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let beta_hat = if r / tau - 1.0 >= 0.0 { beta / 2.0 } else { beta };
    Ok((beta_hat, r))
}

/// Pixel rectangle; `x`/`y` is the top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Window {
    /// Centers of the four corner pixels.
    pub fn corners(&self) -> [Vector2<f64>; 4] {
        let (x0, y0) = (self.x as f64, self.y as f64);
        let (x1, y1) = ((self.x + self.w - 1) as f64, (self.y + self.h - 1) as f64);
        [
            Vector2::new(x0, y0),
            Vector2::new(x1, y0),
            Vector2::new(x0, y1),
            Vector2::new(x1, y1),
        ]
    }
}

/// Window of size `(h, w)` with the largest mean loss, scanned with stride
/// `(h/2, w/2)`; ties go to the first window in row-major order.
pub fn select_loss_window(map: &LossMap, h: usize, w: usize) -> Result<Window, DensifyError> {
    select_loss_window_strided(map, h, w, ((h / 2).max(1), (w / 2).max(1)))
}

pub fn select_loss_window_strided(
    map: &LossMap,
    h: usize,
    w: usize,
    stride: (usize, usize),
) -> Result<Window, DensifyError> {
    if h == 0 || w == 0 || h > map.height || w > map.width {
        return Err(DensifyError::WindowTooLarge {
            h,
            w,
            height: map.height,
            width: map.width,
        });
    }
    // Summed-area table with a zero border row and column.
    let sw = map.width + 1;
    let mut sat = vec![0.0; sw * (map.height + 1)];
    for y in 0..map.height {
        let mut row = 0.0;
        for x in 0..map.width {
            row += map.get(x, y);
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    let rect =
        |x: usize, y: usize| sat[(y + h) * sw + x + w] - sat[y * sw + x + w] - sat[(y + h) * sw + x] + sat[y * sw + x];
    let (sy, sx) = (stride.0.max(1), stride.1.max(1));
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for y in (0..=map.height - h).step_by(sy) {
        for x in (0..=map.width - w).step_by(sx) {
            let s = rect(x, y);
            if s > best.0 {
                best = (s, x, y);
            }
        }
    }
    Ok(Window {
        x: best.1,
        y: best.2,
        w,
        h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// World-space rays from the camera center through the window's corner pixels.
pub fn rays_from_window(camera: &Camera, window: &Window) -> [Ray; 4] {
    let origin = camera.center();
    window.corners().map(|p| Ray {
        origin,
        direction: camera.pixel_direction(&p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayApproach {
    pub t1: f64,
    pub t2: f64,
    pub distance: f64,
    pub midpoint: Vector3<f64>,
    pub parallel: bool,
    /// The closest point lies behind the origin of at least one ray.
    pub behind: bool,
}

/// Closest approach of the two infinite lines carrying the rays.
pub fn ray_closest_points(r1: &Ray, r2: &Ray) -> RayApproach {
    let w0 = r1.origin - r2.origin;
    let b = r1.direction.dot(&r2.direction);
    let d = r1.direction.dot(&w0);
    let e = r2.direction.dot(&w0);
    let denom = 1.0 - b * b;
    let parallel = denom.abs() < 1e-12;
    let (t1, t2) = if parallel {
        (0.0, e)
    } else {
        ((b * e - d) / denom, (e - b * d) / denom)
    };
    let (p1, p2) = (r1.at(t1), r2.at(t2));
    RayApproach {
        t1,
        t2,
        distance: (p1 - p2).norm(),
        midpoint: (p1 + p2) * 0.5,
        parallel,
        behind: t1 < 0.0 || t2 < 0.0,
    }
}

/// Axis-aligned box around cross-view ray meeting points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Positions of the two views in the input list.
    pub views: (usize, usize),
}

pub fn region_contains(cuboid: &Cuboid, point: &Vector3<f64>) -> bool {
    (0..3).all(|k| cuboid.min[k] <= point[k] && point[k] <= cuboid.max[k])
}

/// Midpoints of the corner-ray pairs of two views that pass within
/// `tolerance` of each other in front of both cameras.
pub fn meeting_points(a: &[Ray; 4], b: &[Ray; 4], tolerance: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for r1 in a {
        for r2 in b {
            let c = ray_closest_points(r1, r2);
            if !c.parallel && !c.behind && c.distance < tolerance {
                out.push(c.midpoint);
            }
        }
    }
    out
}

/// One cuboid per view pair with at least two meeting points: their bounding
/// box grown by `margin` on every side.
pub fn cross_ray_regions(views: &[[Ray; 4]], tolerance: f64, margin: f64) -> Vec<Cuboid> {
    let mut out = Vec::new();
    for i in 0..views.len() {
        for j in i + 1..views.len() {
            let pts = meeting_points(&views[i], &views[j], tolerance);
            if pts.len() < 2 {
                continue;
            }
            let mut min = pts[0];
            let mut max = pts[0];
            for p in &pts[1..] {
                min = min.inf(p);
                max = max.sup(p);
            }
            let m = Vector3::repeat(margin);
            out.push(Cuboid {
                min: min - m,
                max: max + m,
                views: (i, j),
            });
        }
    }
    out
}

/// Baseline density-control constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    /// Clone/split scale cut as a fraction of the scene extent.
    pub percent_dense: f64,
    pub split_scale_divisor: f64,
    pub prune_opacity: f64,
    pub max_screen_fraction: f64,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self {
            percent_dense: 0.01,
            split_scale_divisor: 1.6,
            prune_opacity: 0.005,
            max_screen_fraction: 0.8,
        }
    }
}

impl DensifyParams {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            percent_dense: config.percent_dense,
            split_scale_divisor: config.split_scale_divisor,
            prune_opacity: config.prune_opacity,
            max_screen_fraction: config.max_screen_fraction,
        }
    }
}

/// View-space statistics gathered between densification events.
#[derive(Debug, Clone)]
pub struct DensifyState {
    pub grad_norm: Vec<f64>,
    pub touch_count: Vec<u32>,
    pub max_screen_radius: Vec<f64>,
    /// Summed world-space position gradient, used to offset clones.
    pub position_grad: Vec<[f64; 3]>,
    pub regions: Vec<Cuboid>,
    pub scene_extent: f64,
    rng: ChaCha8Rng,
}

impl DensifyState {
    pub fn new(kernels: usize, scene_extent: f64, seed: u64) -> Self {
        Self {
            grad_norm: vec![0.0; kernels],
            touch_count: vec![0; kernels],
            max_screen_radius: vec![0.0; kernels],
            position_grad: vec![[0.0; 3]; kernels],
            regions: Vec::new(),
            scene_extent,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.grad_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_norm.is_empty()
    }

    pub fn accumulate(&mut self, buffer: &GradientBuffer) {
        assert_eq!(
            buffer.len(),
            self.len(),
            "densify statistics out of sync with the cloud"
        );
        for i in 0..self.len() {
            self.grad_norm[i] += buffer.view_grad_norm[i];
            self.touch_count[i] += buffer.touch_count[i];
            self.max_screen_radius[i] = self.max_screen_radius[i].max(buffer.max_screen_radius[i]);
            for k in 0..3 {
                self.position_grad[i][k] += buffer.params.positions[i][k];
            }
        }
    }

    /// Mean view-space gradient norm per kernel over the views that saw it.
    pub fn mean_grad(&self, index: usize) -> f64 {
        match self.touch_count[index] {
            0 => 0.0,
            c => self.grad_norm[index] / c as f64,
        }
    }

    fn reset(&mut self, kernels: usize) {
        self.grad_norm = vec![0.0; kernels];
        self.touch_count = vec![0; kernels];
        self.max_screen_radius = vec![0.0; kernels];
        self.position_grad = vec![[0.0; 3]; kernels];
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyOutcome {
    pub plan: ResizePlan,
    /// Original indices of cloned and split kernels.
    pub cloned: Vec<usize>,
    pub split: Vec<usize>,
    pub pruned: usize,
}

/// Clones small and splits large high-gradient kernels, then prunes faint or
/// oversized ones. Kernels inside a region use half the threshold. Resets
/// the statistics to the new cloud size.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    state: &mut DensifyState,
    beta_hat: f64,
    regions: &[Cuboid],
    params: &DensifyParams,
) -> DensifyOutcome {
    let n = cloud.len();
    assert_eq!(state.len(), n, "densify statistics out of sync with the cloud");
    let scale_cut = params.percent_dense * state.scene_extent;
    let mut cloned = Vec::new();
    let mut split = Vec::new();
    for i in 0..n {
        let pos = Vector3::from(cloud.positions[i]);
        let threshold = if regions.iter().any(|r| region_contains(r, &pos)) {
            beta_hat / 2.0
        } else {
            beta_hat
        };
        if state.mean_grad(i) <= threshold {
            continue;
        }
        let max_scale = cloud.log_scales[i]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .exp();
        if max_scale <= scale_cut {
            cloned.push(i);
        } else {
            split.push(i);
        }
    }

    let stride = cloud.coeffs_per_kernel();
    let mut out = GaussianCloud::empty(cloud.sh_degree);
    let mut sources = Vec::with_capacity(n + cloned.len() + split.len());
    let mut is_split = vec![false; n];
    split.iter().for_each(|&i| is_split[i] = true);
    let mut screen = Vec::with_capacity(n + cloned.len() + split.len());
    for i in 0..n {
        if !is_split[i] {
            out.push(
                cloud.positions[i],
                cloud.rotations[i],
                cloud.log_scales[i],
                cloud.opacity_logits[i],
                cloud.coeffs(i),
            );
            sources.push(Some(i));
            screen.push(state.max_screen_radius[i]);
        }
    }
    for &i in &cloned {
        // Half a scale length down the accumulated position gradient.
        let g = Vector3::from(state.position_grad[i]);
        let offset = if g.norm() > 0.0 {
            -g.normalize() * 0.5 * cloud.scale(i).iter().copied().fold(0.0, f64::max)
        } else {
            Vector3::zeros()
        };
        let p = Vector3::from(cloud.positions[i]) + offset;
        out.push(
            p.into(),
            cloud.rotations[i],
            cloud.log_scales[i],
            cloud.opacity_logits[i],
            cloud.coeffs(i),
        );
        sources.push(None);
        screen.push(0.0);
    }
    let shrink = params.split_scale_divisor.ln();
    for &i in &split {
        let r = quat_to_rotmat(normalized_quat(cloud.rotations[i]));
        let s = Vector3::from(cloud.scale(i));
        let child_log_scale = cloud.log_scales[i].map(|v| v - shrink);
        for _ in 0..2 {
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut state.rng));
            let p = Vector3::from(cloud.positions[i]) + r * s.component_mul(&z);
            out.push(
                p.into(),
                cloud.rotations[i],
                child_log_scale,
                cloud.opacity_logits[i],
                cloud.coeffs(i),
            );
            sources.push(None);
            screen.push(0.0);
        }
    }
    debug_assert_eq!(out.color_coeffs.len(), out.len() * stride);

    let keep: Vec<bool> = (0..out.len())
        .map(|i| out.opacity(i) >= params.prune_opacity && screen[i] <= params.max_screen_fraction)
        .collect();
    let pruned = keep.iter().filter(|k| !**k).count();
    out.retain_mask(&keep);
    let sources = sources
        .into_iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s)
        .collect();

    *cloud = out;
    state.reset(cloud.len());
    DensifyOutcome {
        plan: ResizePlan { sources },
        cloned,
        split,
        pruned,
    }
}

fn normalized_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        q.map(|v| v / n)
    } else {
        [1.0, 0.0, 0.0, 0.0]
    }
}

pub const OPACITY_RESET_VALUE: f64 = 0.01;

/// Caps every activated opacity at 0.01.
pub fn reset_opacity(cloud: &mut GaussianCloud) {
    let cap = logit(OPACITY_RESET_VALUE);
    for v in &mut cloud.opacity_logits {
        *v = v.min(cap);
    }
}

/// One line of the densification log.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub beta_hat: f64,
    pub r_bar: Option<f64>,
    pub regions: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub kernels: usize,
}

impl std::fmt::Display for DensifyEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let r = self.r_bar.map_or_else(|| "nan".to_string(), |r| format!("{r:.6}"));
        write!(
            f,
            "iter={} beta_hat={:.6e} r_bar={} regions={} cloned={} split={} pruned={} n={}",
            self.iteration, self.beta_hat, r, self.regions, self.cloned, self.split, self.pruned, self.kernels
        )
    }
}
