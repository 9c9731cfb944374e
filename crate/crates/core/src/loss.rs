//! Photometric training loss and evaluation metrics.
//!
//! The training loss mixes per-pixel L1 with D-SSIM, `(1 - SSIM) / 2`, using
//! an 11×11 Gaussian window (σ = 1.5) with reflect padding. Its gradient is
//! propagated through the windowed statistics analytically.

use crate::image::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

const RADIUS: usize = SSIM_WINDOW / 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}-pixel SSIM window")]
    ImageTooSmall(usize, usize),
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
}

/// Per-pixel scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl LossMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), LossError> {
    if a.dims() != b.dims() {
        return Err(LossError::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

fn check_ssim_size(img: &ImageBuffer) -> Result<(), LossError> {
    let (w, h) = img.dims();
    if w.min(h) < SSIM_WINDOW {
        return Err(LossError::ImageTooSmall(w, h));
    }
    Ok(())
}

/// Per-pixel mean over channels of `|rendered - target|`.
pub fn l1_map(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<LossMap, LossError> {
    check_dims(rendered, target)?;
    let values = rendered
        .data()
        .chunks_exact(3)
        .zip(target.data().chunks_exact(3))
        .map(|(r, t)| r.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0)
        .collect();
    Ok(LossMap {
        width: rendered.width(),
        height: rendered.height(),
        values,
    })
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Separable Gaussian blur of a channel-interleaved RGB plane.
fn blur(src: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width * 3..(y + 1) * width * 3];
        let out = &mut tmp[y * width * 3..(y + 1) * width * 3];
        for x in 0..width {
            let mut acc = [0.0; 3];
            for (k, &w) in taps.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - RADIUS as isize, width) * 3;
                acc[0] += w * row[sx];
                acc[1] += w * row[sx + 1];
                acc[2] += w * row[sx + 2];
            }
            out[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut dst = vec![0.0; src.len()];
    for y in 0..height {
        let out = &mut dst[y * width * 3..(y + 1) * width * 3];
        for (k, &w) in taps.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - RADIUS as isize, height);
            let row = &tmp[sy * width * 3..(sy + 1) * width * 3];
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
    dst
}

/// Adjoint of [`blur`].
fn blur_adjoint(src: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let g = &src[y * width * 3..(y + 1) * width * 3];
        for (k, &w) in taps.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - RADIUS as isize, height);
            let row = &mut tmp[sy * width * 3..(sy + 1) * width * 3];
            for (o, v) in row.iter_mut().zip(g) {
                *o += w * v;
            }
        }
    }
    let mut dst = vec![0.0; src.len()];
    for y in 0..height {
        let g = &tmp[y * width * 3..(y + 1) * width * 3];
        let out = &mut dst[y * width * 3..(y + 1) * width * 3];
        for x in 0..width {
            for (k, &w) in taps.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - RADIUS as isize, width) * 3;
                out[sx] += w * g[x * 3];
                out[sx + 1] += w * g[x * 3 + 1];
                out[sx + 2] += w * g[x * 3 + 2];
            }
        }
    }
    dst
}

/// Windowed statistics of the target image, reusable across renders.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStats {
    width: usize,
    height: usize,
    mu: Vec<f64>,
    sq: Vec<f64>,
}

impl TargetStats {
    pub fn new(target: &ImageBuffer) -> Self {
        let (w, h) = target.dims();
        let taps = gaussian_window();
        let sq: Vec<f64> = target.data().iter().map(|v| v * v).collect();
        Self {
            width: w,
            height: h,
            mu: blur(target.data(), w, h, &taps),
            sq: blur(&sq, w, h, &taps),
        }
    }
}

struct SsimTerms {
    /// Per pixel and channel SSIM.
    ssim: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_terms(rendered: &ImageBuffer, target: &ImageBuffer, stats: &TargetStats) -> SsimTerms {
    let (w, h) = rendered.dims();
    let taps = gaussian_window();
    let x = rendered.data();
    let y = target.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = blur(x, w, h, &taps);
    let e_xx = blur(&xx, w, h, &taps);
    let e_xy = blur(&xy, w, h, &taps);
    let n = x.len();
    let mut terms = SsimTerms {
        ssim: vec![0.0; n],
        mu_x,
        mu_y: stats.mu.clone(),
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
    };
    for i in 0..n {
        let (mx, my) = (terms.mu_x[i], terms.mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = stats.sq[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        terms.ssim[i] = (a1 * a2) / (b1 * b2);
        terms.a1[i] = a1;
        terms.a2[i] = a2;
        terms.b1[i] = b1;
        terms.b2[i] = b2;
    }
    terms
}

fn channel_mean(per_channel: &[f64]) -> Vec<f64> {
    per_channel
        .chunks_exact(3)
        .map(|c| (c[0] + c[1] + c[2]) / 3.0)
        .collect()
}

/// Per-pixel channel-averaged SSIM.
pub fn ssim_map(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<LossMap, LossError> {
    check_dims(rendered, target)?;
    check_ssim_size(rendered)?;
    let terms = ssim_terms(rendered, target, &TargetStats::new(target));
    Ok(LossMap {
        width: rendered.width(),
        height: rendered.height(),
        values: channel_mean(&terms.ssim),
    })
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<f64, LossError> {
    Ok(ssim_map(rendered, target)?.mean())
}

/// Per-pixel `(1 - SSIM) / 2`.
pub fn dssim_map(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<LossMap, LossError> {
    let mut map = ssim_map(rendered, target)?;
    map.values.iter_mut().for_each(|s| *s = (1.0 - *s) / 2.0);
    Ok(map)
}

/// Result of [`combined_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub map: LossMap,
    /// Derivative of `value` with respect to every rendered pixel value.
    pub grad: ImageBuffer,
}

/// `(1 - λ)·mean(L1) + λ·mean(D-SSIM)` with its per-pixel map and gradient.
pub fn combined_loss(rendered: &ImageBuffer, target: &ImageBuffer, lambda: f64) -> Result<LossOutput, LossError> {
    check_dims(rendered, target)?;
    combined_loss_with_stats(rendered, target, &TargetStats::new(target), lambda)
}

/// [`combined_loss`] with precomputed target statistics.
pub fn combined_loss_with_stats(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    stats: &TargetStats,
    lambda: f64,
) -> Result<LossOutput, LossError> {
    check_dims(rendered, target)?;
    check_ssim_size(rendered)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::LambdaOutOfRange(lambda));
    }
    if (stats.width, stats.height) != target.dims() {
        return Err(LossError::DimensionMismatch((stats.width, stats.height), target.dims()));
    }
    let (w, h) = rendered.dims();
    let pixels = (w * h) as f64;
    let x = rendered.data();
    let y = target.data();
    let terms = ssim_terms(rendered, target, stats);

    let mut values = Vec::with_capacity(w * h);
    for (i, (r, t)) in x.chunks_exact(3).zip(y.chunks_exact(3)).enumerate() {
        let l1 = r.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        let s = &terms.ssim[i * 3..i * 3 + 3];
        let dssim = (1.0 - (s[0] + s[1] + s[2]) / 3.0) / 2.0;
        values.push((1.0 - lambda) * l1 + lambda * dssim);
    }
    let map = LossMap {
        width: w,
        height: h,
        values,
    };
    let value = map.mean();

    let n = x.len();
    let mut grad: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (1.0 - lambda) * sign / (3.0 * pixels)
        })
        .collect();

    if lambda > 0.0 {
        let d_s = -lambda / (6.0 * pixels);
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (terms.mu_x[i], terms.mu_y[i]);
            let (a1, a2, b1, b2) = (terms.a1[i], terms.a2[i], terms.b1[i], terms.b2[i]);
            let s = terms.ssim[i];
            let ds_dmu = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let ds_dsxx = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            g_mu[i] = d_s * (ds_dmu - 2.0 * mx * ds_dsxx - my * ds_dsxy);
            g_xx[i] = d_s * ds_dsxx;
            g_xy[i] = d_s * ds_dsxy;
        }
        let taps = gaussian_window();
        let b_mu = blur_adjoint(&g_mu, w, h, &taps);
        let b_xx = blur_adjoint(&g_xx, w, h, &taps);
        let b_xy = blur_adjoint(&g_xy, w, h, &taps);
        for i in 0..n {
            grad[i] += b_mu[i] + 2.0 * x[i] * b_xx[i] + y[i] * b_xy[i];
        }
    }

    Ok(LossOutput {
        value,
        map,
        grad: ImageBuffer::from_vec(w, h, grad),
    })
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<f64, LossError> {
    check_dims(rendered, target)?;
    let n = rendered.data().len();
    if n == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = rendered
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}
