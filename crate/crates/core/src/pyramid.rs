//! Coarse-to-fine image pyramid.
//!
//! Each level trains on images downsampled by an integer factor, with the
//! intrinsics rescaled to match, and samples its own number of views per
//! iteration.

use std::fmt;

use crate::camera::Camera;
use crate::config::TrainConfig;
use crate::image::ImageBuffer;
use crate::loss::SSIM_WINDOW;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PyramidError {
    #[error("downscaling {width}x{height} by {factor} leaves less than {min} pixels per side", min = SSIM_WINDOW)]
    ResultTooSmall { width: u32, height: u32, factor: u32 },
    #[error("coarse budgets total {coarse} but only {total} iterations are available")]
    BudgetExceedsTotal { coarse: usize, total: usize },
    #[error("iteration {iter} outside the schedule of {total}")]
    OutOfRange { iter: usize, total: usize },
    #[error("invalid pyramid: {0}")]
    InvalidLevels(String),
}

/// Divides focal lengths, principal point and image size by `factor`.
pub fn downscale_camera(camera: &Camera, factor: u32) -> Result<Camera, PyramidError> {
    assert!(factor >= 1, "downsampling factor must be at least 1");
    let (w, h) = (camera.width / factor, camera.height / factor);
    if (w as usize) < SSIM_WINDOW || (h as usize) < SSIM_WINDOW {
        return Err(PyramidError::ResultTooSmall {
            width: camera.width,
            height: camera.height,
            factor,
        });
    }
    let s = factor as f64;
    Ok(Camera {
        fx: camera.fx / s,
        fy: camera.fy / s,
        cx: camera.cx / s,
        cy: camera.cy / s,
        width: w,
        height: h,
        ..camera.clone()
    })
}

/// Averages each `factor`×`factor` block after cropping to multiples of `factor`.
pub fn downscale_image(image: &ImageBuffer, factor: u32) -> ImageBuffer {
    assert!(factor >= 1, "downsampling factor must be at least 1");
    if factor == 1 {
        return image.clone();
    }
    let s = factor as usize;
    let (w, h) = (image.width() / s, image.height() / s);
    let norm = 1.0 / (s * s) as f64;
    let mut out = ImageBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for yy in y * s..(y + 1) * s {
                for xx in x * s..(x + 1) * s {
                    let p = image.pixel(xx, yy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set_pixel(x, y, acc.map(|v| v * norm));
        }
    }
    out
}

/// One pyramid stage over the half-open iteration range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub level: usize,
    pub factor: u32,
    pub views: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub entries: Vec<ScheduleEntry>,
}

impl Schedule {
    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.end)
    }

    pub fn level_for_iteration(&self, iter: usize) -> Result<&ScheduleEntry, PyramidError> {
        self.entries
            .iter()
            .find(|e| e.start <= iter && iter < e.end)
            .ok_or(PyramidError::OutOfRange {
                iter,
                total: self.total(),
            })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "level {} factor {} views {} iterations [{}, {})",
                e.level, e.factor, e.views, e.start, e.end
            )?;
        }
        Ok(())
    }
}

/// Lays out the pyramid levels over the iteration budget. Without the
/// pyramid component only the full-resolution level remains; without
/// multi-view learning every level uses one view. View counts are capped
/// at `available_views`.
pub fn build_schedule(config: &TrainConfig, available_views: usize) -> Result<Schedule, PyramidError> {
    if config.pyramid.is_empty() || config.pyramid.len() != config.views_per_level.len() {
        return Err(PyramidError::InvalidLevels(format!(
            "{} factors for {} view counts",
            config.pyramid.len(),
            config.views_per_level.len()
        )));
    }
    if config.pyramid.windows(2).any(|w| w[0] <= w[1]) || config.pyramid.last() != Some(&1) {
        return Err(PyramidError::InvalidLevels(format!(
            "factors {:?} must strictly decrease to 1",
            config.pyramid
        )));
    }
    if available_views == 0 {
        return Err(PyramidError::InvalidLevels("no training views".into()));
    }
    let mut levels: Vec<(u32, usize)> = if config.components.cig {
        config
            .pyramid
            .iter()
            .copied()
            .zip(config.views_per_level.iter().copied())
            .collect()
    } else {
        vec![(1, *config.views_per_level.last().unwrap())]
    };
    for (_, m) in &mut levels {
        *m = if config.components.mvrl {
            (*m).clamp(1, available_views)
        } else {
            1
        };
    }
    let coarse = config.coarse_iters * (levels.len() - 1);
    if coarse >= config.iterations || (levels.len() > 1 && config.coarse_iters == 0) {
        return Err(PyramidError::BudgetExceedsTotal {
            coarse,
            total: config.iterations,
        });
    }
    let last = levels.len() - 1;
    let entries = levels
        .into_iter()
        .enumerate()
        .map(|(level, (factor, views))| {
            let start = level * config.coarse_iters;
            let end = if level == last {
                config.iterations
            } else {
                start + config.coarse_iters
            };
            ScheduleEntry {
                level,
                factor,
                views,
                start,
                end,
            }
        })
        .collect();
    Ok(Schedule { entries })
}

/// Cameras and target images of one pyramid level.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub factor: u32,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
}

impl PyramidLevel {
    pub fn build(factor: u32, cameras: &[Camera], images: &[ImageBuffer]) -> Result<Self, PyramidError> {
        let cameras = cameras
            .iter()
            .map(|c| downscale_camera(c, factor))
            .collect::<Result<Vec<_>, _>>()?;
        let images = images.iter().map(|img| downscale_image(img, factor)).collect();
        Ok(Self {
            factor,
            cameras,
            images,
        })
    }
}
