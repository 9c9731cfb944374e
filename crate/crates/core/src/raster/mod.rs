//! Differentiable tile rasterizer.
//!
//! Kernels are projected with the EWA approximation, binned into 16×16
//! pixel tiles by their 3σ footprint, sorted front to back by
//! `(depth, index)` and alpha-composited per pixel. The forward pass records
//! every blended contribution so the backward pass can replay it exactly.

pub mod project;
pub mod sh;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

pub use project::{
    compute_cov3d, cov2d_backward, cov3d_backward, footprint_radius, pinhole_jacobian, project_cov2d,
    project_cov2d_raw, quat_to_rotmat, LOW_PASS_DILATION,
};
pub use sh::eval_sh_color;

use crate::camera::Camera;
use crate::cloud::{sh_basis_count, sigmoid, CloudViolation, GaussianCloud};
use crate::image::ImageBuffer;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RasterError {
    #[error("invalid cloud: {0}")]
    InvalidCloud(#[from] CloudViolation),
    #[error("invalid camera: {0}")]
    InvalidCamera(#[from] crate::camera::CameraError),
    #[error("quaternion norm {norm:e} is too small")]
    DegenerateQuaternion { norm: f64 },
    #[error("render aux does not match the inputs: {0}")]
    AuxMismatch(String),
}

/// A kernel after projection into one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedKernel {
    pub index: u32,
    pub mean: [f64; 2],
    /// Dilated pixel-space covariance `(xx, xy, yy)`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub radius: f64,
    /// Largest `-power` at which alpha can still reach `ALPHA_MIN`, padded
    /// against rounding; negative if it never does.
    pub reach: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Contribution {
    /// Position in the owning tile's sorted kernel list.
    local: u32,
    alpha: f64,
    /// Transmittance before this kernel was blended.
    trans: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct TileRecord {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Range into `RenderAux::order`.
    list: std::ops::Range<usize>,
    contributions: Vec<Contribution>,
    /// Exclusive end offset into `contributions` per tile pixel (row-major).
    pixel_ends: Vec<u32>,
    final_trans: Vec<f64>,
}

/// Everything needed to replay a forward pass or run its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderAux {
    width: usize,
    height: usize,
    kernel_count: usize,
    sh_degree_active: usize,
    background: [f64; 3],
    projected: Vec<ProjectedKernel>,
    /// Projected-kernel slots, grouped by tile and sorted front to back.
    order: Vec<u32>,
    tiles: Vec<TileRecord>,
}

impl RenderAux {
    pub fn projected(&self) -> &[ProjectedKernel] {
        &self.projected
    }

    pub fn contribution_count(&self) -> usize {
        self.tiles.iter().map(|t| t.contributions.len()).sum()
    }

    /// Per-pixel blending weights `α_i·T_i` in front-to-back order.
    pub fn pixel_weights(&self, x: usize, y: usize) -> Vec<(u32, f64)> {
        let tiles_x = self.width.div_ceil(TILE_SIZE);
        let tile = &self.tiles[(y / TILE_SIZE) * tiles_x + x / TILE_SIZE];
        let tw = tile.x1 - tile.x0;
        let p = (y - tile.y0) * tw + (x - tile.x0);
        let start = if p == 0 { 0 } else { tile.pixel_ends[p - 1] as usize };
        let end = tile.pixel_ends[p] as usize;
        tile.contributions[start..end]
            .iter()
            .map(|c| {
                let slot = self.order[tile.list.start + c.local as usize];
                (self.projected[slot as usize].index, c.alpha * c.trans)
            })
            .collect()
    }

    /// Recomposes the image from the recorded contributions.
    pub fn replay(&self) -> ImageBuffer {
        let mut image = ImageBuffer::new(self.width, self.height);
        for tile in &self.tiles {
            let list = &self.order[tile.list.clone()];
            let tw = tile.x1 - tile.x0;
            let mut start = 0;
            for (p, &end) in tile.pixel_ends.iter().enumerate() {
                let mut rgb = [0.0; 3];
                for c in &tile.contributions[start..end as usize] {
                    let pk = &self.projected[list[c.local as usize] as usize];
                    let w = c.alpha * c.trans;
                    for ch in 0..3 {
                        rgb[ch] += pk.color[ch] * w;
                    }
                }
                let t = tile.final_trans[p];
                for ch in 0..3 {
                    rgb[ch] += t * self.background[ch];
                }
                image.set_pixel(tile.x0 + p % tw, tile.y0 + p / tw, rgb);
                start = end as usize;
            }
        }
        image
    }
}

/// Gradients of all trainable attributes, shaped like a [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CloudGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub color_coeffs: Vec<f64>,
}

impl CloudGrads {
    pub fn zeros(kernels: usize, coeffs_per_kernel: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; kernels],
            rotations: vec![[0.0; 4]; kernels],
            log_scales: vec![[0.0; 3]; kernels],
            opacity_logits: vec![0.0; kernels],
            color_coeffs: vec![0.0; kernels * coeffs_per_kernel],
        }
    }

    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        Self::zeros(cloud.len(), cloud.coeffs_per_kernel())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &CloudGrads) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            add_flat(a.as_flattened_mut(), b.as_flattened());
        }
        fn add_flat(a: &mut [f64], b: &[f64]) {
            assert_eq!(a.len(), b.len());
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add(&mut self.positions, &other.positions);
        add(&mut self.rotations, &other.rotations);
        add(&mut self.log_scales, &other.log_scales);
        add_flat(&mut self.opacity_logits, &other.opacity_logits);
        add_flat(&mut self.color_coeffs, &other.color_coeffs);
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.flat_iter_mut() {
            *v *= factor;
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.flat_iter_mut() {
            *v = 0.0;
        }
    }

    fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.positions
            .as_flattened_mut()
            .iter_mut()
            .chain(self.rotations.as_flattened_mut())
            .chain(self.log_scales.as_flattened_mut())
            .chain(self.opacity_logits.iter_mut())
            .chain(self.color_coeffs.iter_mut())
    }

    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.positions
            .as_flattened()
            .iter()
            .chain(self.rotations.as_flattened())
            .chain(self.log_scales.as_flattened())
            .chain(&self.opacity_logits)
            .chain(&self.color_coeffs)
            .copied()
    }
}

/// Gradients of one rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub params: CloudGrads,
    /// Gradient with respect to each kernel's projected mean, in pixels.
    pub mean2d: Vec<[f64; 2]>,
    /// Kernels that contributed to at least one pixel.
    pub touched: Vec<bool>,
    /// Projected 3σ radius as a fraction of the larger image side (0 if culled).
    pub screen_radius: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub sh_degree_active: usize,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            sh_degree_active: 0,
            background: [0.0; 3],
        }
    }
}

/// Direction from the camera center to the kernel, normalized, with its length.
fn view_direction(camera_center: &Vector3<f64>, position: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let d = position - camera_center;
    let len = d.norm();
    if len > 0.0 {
        (d / len, len)
    } else {
        (Vector3::z(), 0.0)
    }
}

fn project_kernel(
    cloud: &GaussianCloud,
    camera: &Camera,
    camera_center: &Vector3<f64>,
    index: usize,
    sh_degree: usize,
) -> Result<Option<ProjectedKernel>, RasterError> {
    let mean = Vector3::from(cloud.positions[index]);
    let p = camera.world_to_camera(&mean);
    if p.z <= camera.near {
        return Ok(None);
    }
    let cov3d = compute_cov3d(cloud.rotations[index], cloud.log_scales[index])?;
    let cov = project_cov2d_raw(camera, &p, &cov3d)? + Matrix2::identity() * LOW_PASS_DILATION;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) {
        return Ok(None);
    }
    let (pixel, depth) = camera.project_camera_space(&p)?;
    let radius = footprint_radius(&cov);
    let (w, h) = (camera.width as f64, camera.height as f64);
    if pixel.x + radius < 0.0 || pixel.y + radius < 0.0 || pixel.x - radius > w - 1.0 || pixel.y - radius > h - 1.0 {
        return Ok(None);
    }
    let (dir, _) = view_direction(camera_center, &mean);
    let opacity = sigmoid(cloud.opacity_logits[index]);
    let color = eval_sh_color(cloud.coeffs(index), dir.into(), sh_degree.min(cloud.sh_degree));
    Ok(Some(ProjectedKernel {
        index: index as u32,
        mean: [pixel.x, pixel.y],
        cov: [cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]],
        conic: [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det],
        depth,
        color,
        opacity,
        radius,
        reach: alpha_reach(opacity),
    }))
}

#[inline]
fn gaussian_power(pk: &ProjectedKernel, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - pk.mean[0];
    let dy = py - pk.mean[1];
    let [a, b, c] = pk.conic;
    (-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy, dx, dy)
}

fn alpha_reach(opacity: f64) -> f64 {
    let reach = (opacity / ALPHA_MIN).ln();
    if reach >= 0.0 {
        reach * (1.0 + 1e-9) + 1e-9
    } else {
        -1.0
    }
}

/// Pixel x-interval on row `py` where the kernel can reach `ALPHA_MIN`,
/// slightly widened so rounding never drops a contributing pixel.
#[inline]
fn row_span(pk: &ProjectedKernel, py: f64) -> Option<(f64, f64)> {
    let reach = pk.reach;
    let [a, b, c] = pk.conic;
    let dy = py - pk.mean[1];
    // a·dx² + 2b·dy·dx + c·dy² <= 2·reach
    let disc = b * b * dy * dy - a * (c * dy * dy - 2.0 * reach);
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let pad = 1e-6 * (1.0 + root.abs() / a);
    Some((
        pk.mean[0] + (-b * dy - root) / a - pad,
        pk.mean[0] + (-b * dy + root) / a + pad,
    ))
}

/// Renders `cloud` from `camera`.
pub fn forward_render(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(ImageBuffer, RenderAux), RasterError> {
    cloud.validate()?;
    forward_render_unchecked(cloud, camera, settings)
}

/// [`forward_render`] for a cloud the caller has already validated.
pub(crate) fn forward_render_unchecked(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(ImageBuffer, RenderAux), RasterError> {
    camera.validate()?;
    let width = camera.width as usize;
    let height = camera.height as usize;
    let center = camera.center();

    let projected: Vec<ProjectedKernel> = (0..cloud.len())
        .into_par_iter()
        .map(|i| project_kernel(cloud, camera, &center, i, settings.sh_degree_active))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    // Depth order once, then a stable bucket pass by tile keeps every tile
    // list sorted by (depth, index).
    // Depths are positive, so their bit patterns sort like the values.
    let mut by_depth: Vec<(u64, u32, u32)> = projected
        .iter()
        .enumerate()
        .map(|(slot, pk)| (pk.depth.to_bits(), pk.index, slot as u32))
        .collect();
    by_depth.sort_unstable();
    let n_tiles = tiles_x * tiles_y;
    let tile_span = |pk: &ProjectedKernel| -> Option<[usize; 4]> {
        // 3σ square, narrowed to the box where alpha can reach ALPHA_MIN.
        if pk.reach < 0.0 {
            return None;
        }
        let ex = pk.radius.min((2.0 * pk.reach * pk.cov[0]).sqrt());
        let ey = pk.radius.min((2.0 * pk.reach * pk.cov[2]).sqrt());
        let clampi = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
        Some([
            clampi(((pk.mean[0] - ex) / TILE_SIZE as f64).floor(), tiles_x),
            clampi(((pk.mean[0] + ex) / TILE_SIZE as f64).floor(), tiles_x),
            clampi(((pk.mean[1] - ey) / TILE_SIZE as f64).floor(), tiles_y),
            clampi(((pk.mean[1] + ey) / TILE_SIZE as f64).floor(), tiles_y),
        ])
    };
    let spans: Vec<Option<[usize; 4]>> = projected.iter().map(tile_span).collect();
    let mut counts = vec![0usize; n_tiles + 1];
    for [tx0, tx1, ty0, ty1] in spans.iter().flatten() {
        for ty in *ty0..=*ty1 {
            for tx in *tx0..=*tx1 {
                counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for t in 0..n_tiles {
        counts[t + 1] += counts[t];
    }
    let ranges: Vec<std::ops::Range<usize>> = (0..n_tiles).map(|t| counts[t]..counts[t + 1]).collect();
    let mut order = vec![0u32; counts[n_tiles]];
    let mut fill = counts;
    for &(_, _, slot) in &by_depth {
        if let Some([tx0, tx1, ty0, ty1]) = spans[slot as usize] {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    let t = ty * tiles_x + tx;
                    order[fill[t]] = slot;
                    fill[t] += 1;
                }
            }
        }
    }

    let background = settings.background;
    let tiles: Vec<(TileRecord, Vec<[f64; 3]>)> = ranges
        .into_par_iter()
        .enumerate()
        .map(|(t, list)| {
            let x0 = (t % tiles_x) * TILE_SIZE;
            let y0 = (t / tiles_x) * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(width);
            let y1 = (y0 + TILE_SIZE).min(height);
            let kernels: Vec<&ProjectedKernel> = order[list.clone()].iter().map(|&s| &projected[s as usize]).collect();
            let n_pixels = (x1 - x0) * (y1 - y0);
            let mut contributions = Vec::new();
            let mut pixel_ends = Vec::with_capacity(n_pixels);
            let mut final_trans = Vec::with_capacity(n_pixels);
            let mut colors = Vec::with_capacity(n_pixels);
            // Per row, the kernels whose alpha can reach ALPHA_MIN there and
            // their x-extent, in depth order.
            let mut rows: Vec<Vec<(u32, f64, f64)>> = vec![Vec::new(); y1 - y0];
            for (j, pk) in kernels.iter().enumerate() {
                let ey = (2.0 * pk.reach * pk.cov[2]).sqrt();
                let lo = ((pk.mean[1] - ey).ceil().max(y0 as f64)) as usize;
                let hi = ((pk.mean[1] + ey).floor().min((y1 - 1) as f64)).max(-1.0);
                if hi < 0.0 {
                    continue;
                }
                for y in lo..=hi as usize {
                    if let Some((l, h)) = row_span(pk, y as f64) {
                        if h >= x0 as f64 && l <= (x1 - 1) as f64 {
                            rows[y - y0].push((j as u32, l, h));
                        }
                    }
                }
            }
            for y in y0..y1 {
                let py = y as f64;
                let row = &rows[y - y0];
                for x in x0..x1 {
                    let px = x as f64;
                    let mut trans = 1.0;
                    let mut rgb = [0.0; 3];
                    for &(j, lo, hi) in row {
                        if px < lo || px > hi {
                            continue;
                        }
                        let pk = kernels[j as usize];
                        let (power, _, _) = gaussian_power(pk, px, py);
                        if power > 0.0 {
                            continue;
                        }
                        let alpha = (pk.opacity * power.exp()).min(ALPHA_MAX);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        contributions.push(Contribution { local: j, alpha, trans });
                        let w = alpha * trans;
                        for ch in 0..3 {
                            rgb[ch] += pk.color[ch] * w;
                        }
                        trans *= 1.0 - alpha;
                        if trans < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        rgb[ch] += trans * background[ch];
                    }
                    pixel_ends.push(contributions.len() as u32);
                    final_trans.push(trans);
                    colors.push(rgb);
                }
            }
            (
                TileRecord {
                    x0,
                    y0,
                    x1,
                    y1,
                    list,
                    contributions,
                    pixel_ends,
                    final_trans,
                },
                colors,
            )
        })
        .collect();

    let mut image = ImageBuffer::new(width, height);
    let mut records = Vec::with_capacity(tiles.len());
    for (tile, colors) in tiles {
        let tw = tile.x1 - tile.x0;
        for (p, rgb) in colors.into_iter().enumerate() {
            image.set_pixel(tile.x0 + p % tw, tile.y0 + p / tw, rgb);
        }
        records.push(tile);
    }

    let aux = RenderAux {
        width,
        height,
        kernel_count: cloud.len(),
        sh_degree_active: settings.sh_degree_active,
        background,
        projected,
        order,
        tiles: records,
    };
    Ok((image, aux))
}

/// Per projected kernel: d/dcolor (3), d/dopacity, d/dmean (2), d/dconic (3).
type Grad2d = [f64; 9];

/// Analytic gradients of `sum(dl_dimage ∘ render(cloud))` with respect to
/// every trainable attribute.
pub fn backward_render(
    cloud: &GaussianCloud,
    camera: &Camera,
    aux: &RenderAux,
    dl_dimage: &ImageBuffer,
) -> Result<ParamGradients, RasterError> {
    check_aux(cloud, camera, aux, dl_dimage)?;
    let (width, height) = (aux.width, aux.height);
    let n = cloud.len();
    let stride = cloud.coeffs_per_kernel();
    let mut grads = ParamGradients {
        params: CloudGrads::zeros_like(cloud),
        mean2d: vec![[0.0; 2]; n],
        touched: vec![false; n],
        screen_radius: vec![0.0; n],
    };
    let screen = width.max(height) as f64;
    for pk in &aux.projected {
        grads.screen_radius[pk.index as usize] = pk.radius / screen;
    }
    for_each_kernel_grad(cloud, camera, aux, dl_dimage, |i, kg| {
        grads.touched[i] = true;
        grads.mean2d[i] = kg.mean2d;
        grads.params.positions[i] = kg.position;
        grads.params.rotations[i] = kg.rotation;
        grads.params.log_scales[i] = kg.log_scale;
        grads.params.opacity_logits[i] = kg.opacity_logit;
        grads.params.color_coeffs[i * stride..(i + 1) * stride].copy_from_slice(&kg.coeffs);
    })?;
    Ok(grads)
}

/// Errors unless `aux` came from rendering `cloud` through `camera` and
/// `dl_dimage` matches its size.
pub(crate) fn check_aux(
    cloud: &GaussianCloud,
    camera: &Camera,
    aux: &RenderAux,
    dl_dimage: &ImageBuffer,
) -> Result<(), RasterError> {
    let (width, height) = (camera.width as usize, camera.height as usize);
    if aux.width != width || aux.height != height {
        return Err(RasterError::AuxMismatch(format!(
            "aux is {}x{}, camera is {width}x{height}",
            aux.width, aux.height
        )));
    }
    if aux.kernel_count != cloud.len() {
        return Err(RasterError::AuxMismatch(format!(
            "aux was rendered from {} kernels, cloud has {}",
            aux.kernel_count,
            cloud.len()
        )));
    }
    if dl_dimage.dims() != (width, height) {
        return Err(RasterError::AuxMismatch(format!(
            "upstream gradient is {:?}, image is {width}x{height}",
            dl_dimage.dims()
        )));
    }

    Ok(())
}

/// Backward pass that hands each touched kernel's gradient to `sink` in
/// projection order instead of materializing full-cloud arrays. `aux` must
/// already be checked against the camera and upstream gradient.
pub(crate) fn for_each_kernel_grad(
    cloud: &GaussianCloud,
    camera: &Camera,
    aux: &RenderAux,
    dl_dimage: &ImageBuffer,
    mut sink: impl FnMut(usize, &KernelGrad),
) -> Result<(), RasterError> {
    let width = aux.width;
    let upstream = dl_dimage.data();
    let background = aux.background;
    let per_tile: Vec<Vec<Grad2d>> = aux
        .tiles
        .par_iter()
        .map(|tile| {
            let list = &aux.order[tile.list.clone()];
            let mut local = vec![[0.0; 9]; list.len()];
            let tw = tile.x1 - tile.x0;
            let mut start = 0usize;
            for (p, &end) in tile.pixel_ends.iter().enumerate() {
                let end = end as usize;
                let x = tile.x0 + p % tw;
                let y = tile.y0 + p / tw;
                let (px, py) = (x as f64, y as f64);
                let gi = (y * width + x) * 3;
                let dl_dc = [upstream[gi], upstream[gi + 1], upstream[gi + 2]];
                let t_final = tile.final_trans[p];
                let mut suffix = background.map(|b| b * t_final);
                for c in tile.contributions[start..end].iter().rev() {
                    let pk = &aux.projected[list[c.local as usize] as usize];
                    let g = &mut local[c.local as usize];
                    let w = c.alpha * c.trans;
                    let mut dl_dalpha = 0.0;
                    for ch in 0..3 {
                        g[ch] += dl_dc[ch] * w;
                        dl_dalpha += dl_dc[ch] * (pk.color[ch] * c.trans - suffix[ch] / (1.0 - c.alpha));
                        suffix[ch] += pk.color[ch] * w;
                    }
                    if c.alpha >= ALPHA_MAX {
                        continue;
                    }
                    let (_, dx, dy) = gaussian_power(pk, px, py);
                    // Unclamped, so alpha = opacity·gauss.
                    let gauss = c.alpha / pk.opacity;
                    g[3] += dl_dalpha * gauss;
                    let dl_dpower = dl_dalpha * pk.opacity * gauss;
                    let [a, b, cc] = pk.conic;
                    g[4] += dl_dpower * (a * dx + b * dy);
                    g[5] += dl_dpower * (b * dx + cc * dy);
                    g[6] += dl_dpower * (-0.5 * dx * dx);
                    g[7] += dl_dpower * (-0.5 * dx * dy);
                    g[8] += dl_dpower * (-0.5 * dy * dy);
                }
                start = end;
            }
            local
        })
        .collect();

    let mut grad2d = vec![[0.0; 9]; aux.projected.len()];
    let mut touched_slot = vec![false; aux.projected.len()];
    for (tile, local) in aux.tiles.iter().zip(&per_tile) {
        let list = &aux.order[tile.list.clone()];
        for c in &tile.contributions {
            touched_slot[list[c.local as usize] as usize] = true;
        }
        for (j, g) in local.iter().enumerate() {
            let dst = &mut grad2d[list[j] as usize];
            for k in 0..9 {
                dst[k] += g[k];
            }
        }
    }

    let center = camera.center();
    let per_kernel: Vec<(usize, KernelGrad)> = aux
        .projected
        .par_iter()
        .enumerate()
        .filter(|(slot, _)| touched_slot[*slot])
        .map(|(slot, pk)| {
            kernel_backward(cloud, camera, &center, pk, &grad2d[slot], aux.sh_degree_active)
                .map(|g| (pk.index as usize, g))
        })
        .collect::<Result<_, _>>()?;

    for (i, kg) in &per_kernel {
        sink(*i, kg);
    }
    Ok(())
}
pub(crate) struct KernelGrad {
    pub mean2d: [f64; 2],
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub coeffs: Vec<f64>,
}

fn kernel_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    camera_center: &Vector3<f64>,
    pk: &ProjectedKernel,
    g: &Grad2d,
    sh_degree_active: usize,
) -> Result<KernelGrad, RasterError> {
    let i = pk.index as usize;
    let mean = Vector3::from(cloud.positions[i]);
    let p = camera.world_to_camera(&mean);

    // Color -> SH coefficients and view direction.
    let degree = sh_degree_active.min(cloud.sh_degree);
    let (dir, dist) = view_direction(camera_center, &mean);
    let (basis, basis_grad) = sh::basis_with_grad(dir.into(), degree);
    let coeffs = cloud.coeffs(i);
    let mut d_coeffs = vec![0.0; coeffs.len()];
    let mut d_dir = Vector3::zeros();
    for ch in 0..3 {
        if pk.color[ch] <= 0.0 {
            continue;
        }
        let dl_dcolor = g[ch];
        for k in 0..sh_basis_count(degree) {
            d_coeffs[k * 3 + ch] = dl_dcolor * basis[k];
            d_dir += Vector3::from(basis_grad[k]) * (coeffs[k * 3 + ch] * dl_dcolor);
        }
    }
    let mut d_mean = Vector3::zeros();
    if degree > 0 && dist > 0.0 {
        d_mean += (d_dir - dir * dir.dot(&d_dir)) / dist;
    }

    // Opacity.
    let d_logit = g[3] * pk.opacity * (1.0 - pk.opacity);

    // Conic -> covariance: dL/dΣ = -A·G·A with the full-matrix convention.
    let conic = Matrix2::new(pk.conic[0], pk.conic[1], pk.conic[1], pk.conic[2]);
    let d_conic = Matrix2::new(g[6], g[7], g[7], g[8]);
    let d_cov2d = -(conic * d_conic * conic);
    let cov3d = compute_cov3d(cloud.rotations[i], cloud.log_scales[i])?;
    let (mut d_p, d_cov3d) = cov2d_backward(camera, &p, &cov3d, &d_cov2d);
    let (d_rot, d_log_scale) = cov3d_backward(cloud.rotations[i], cloud.log_scales[i], &d_cov3d)?;

    // Projected mean -> camera-space point.
    let (du, dv) = (g[4], g[5]);
    let iz = 1.0 / p.z;
    d_p += Vector3::new(
        du * camera.fx * iz,
        dv * camera.fy * iz,
        -(du * camera.fx * p.x + dv * camera.fy * p.y) * iz * iz,
    );
    d_mean += camera.rotation.transpose() * d_p;

    Ok(KernelGrad {
        mean2d: [du, dv],
        position: d_mean.into(),
        rotation: d_rot,
        log_scale: d_log_scale,
        opacity_logit: d_logit,
        coeffs: d_coeffs,
    })
}

/// Projects the kernel centers of `cloud` into `camera` as pixel coordinates;
/// `None` for kernels at or behind the near plane.
pub fn project_centers(cloud: &GaussianCloud, camera: &Camera) -> Vec<Option<Vector2<f64>>> {
    cloud
        .positions
        .iter()
        .map(|p| {
            let pc = camera.world_to_camera(&Vector3::from(*p));
            (pc.z > camera.near)
                .then(|| camera.project_camera_space(&pc).ok().map(|(px, _)| px))
                .flatten()
        })
        .collect()
}
