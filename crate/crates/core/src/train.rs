//! The training loop.
//!
//! Per iteration: pick the pyramid level, sample its number of views, sum
//! their gradients, take one Adam step, and on the densification interval
//! grow and prune the cloud.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{scene_extent, Camera};
use crate::cloud::{logit, GaussianCloud};
use crate::config::{ConfigError, TrainConfig};
use crate::densify::{
    adaptive_threshold, cross_ray_regions, densify_and_prune, normalize_camera_translations, pairwise_distances,
    rays_from_window, reset_opacity, select_loss_window, DensifyEvent, DensifyParams, DensifyState,
};
use crate::image::ImageBuffer;
use crate::loss::{psnr, ssim, LossError, TargetStats};
use crate::optim::{accumulate_multiview, adam_step, AdamState, LrSchedule, OptimError, TrainView, ViewSampler};
use crate::pyramid::{build_schedule, PyramidError, PyramidLevel, Schedule};
use crate::raster::sh::rgb_to_dc;
use crate::raster::{forward_render, RasterError, RenderSettings};
use crate::sceneio::{save_checkpoint, write_png, Checkpoint, Dataset, MetricsRecord, MetricsWriter, SceneError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("I/O failure on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Everything a finished run produced in memory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<DensifyEvent>,
    pub schedule: Schedule,
    /// Forward+backward view renders spent on training.
    pub view_renders: usize,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub config_hash: String,
}

impl TrainOutcome {
    pub fn checkpoint(&self, iteration: u64) -> Checkpoint {
        Checkpoint {
            cloud: self.cloud.clone(),
            iteration,
            config_hash: self.config_hash.clone(),
        }
    }
}

/// Random cloud in a ball around the camera centroid. Scales start at the
/// RMS distance to the three nearest neighbours.
pub fn initial_cloud(config: &TrainConfig, cameras: &[Camera]) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1a17_c10d);
    let centroid = cameras.iter().map(Camera::center).sum::<Vector3<f64>>() / cameras.len().max(1) as f64;
    let radius = config.init_radius * scene_extent(cameras);
    let mut cloud = GaussianCloud::empty(config.sh_degree);
    let mut coeffs = vec![0.0; cloud.coeffs_per_kernel()];
    let positions: Vec<Vector3<f64>> = (0..config.init_points)
        .map(|_| loop {
            let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0));
            if p.norm_squared() <= 1.0 {
                break centroid + p * radius;
            }
        })
        .collect();
    for (i, p) in positions.iter().enumerate() {
        let mut nearest = [f64::INFINITY; 3];
        for (j, q) in positions.iter().enumerate() {
            if i != j {
                let d = (p - q).norm_squared();
                if d < nearest[2] {
                    nearest[2] = d;
                    nearest.sort_by(f64::total_cmp);
                }
            }
        }
        let finite: Vec<f64> = nearest.iter().copied().filter(|d| d.is_finite()).collect();
        let mean = if finite.is_empty() {
            radius * radius
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let log_scale = 0.5 * mean.max(1e-7).ln();
        for c in 0..3 {
            coeffs[c] = rgb_to_dc(rng.random_range(0.0..=1.0));
        }
        cloud.push((*p).into(), [1.0, 0.0, 0.0, 0.0], [log_scale; 3], logit(0.1), &coeffs);
    }
    cloud
}

/// Mean PSNR and SSIM over the given views at full resolution.
pub fn evaluate(
    cloud: &GaussianCloud,
    dataset: &Dataset,
    views: &[usize],
    settings: &RenderSettings,
) -> Result<(f64, f64), TrainError> {
    if views.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for &v in views {
        let (img, _) = forward_render(cloud, &dataset.cameras[v], settings)?;
        p += psnr(&img, &dataset.images[v])?;
        s += ssim(&img, &dataset.images[v])?;
    }
    Ok((p / views.len() as f64, s / views.len() as f64))
}

struct Level {
    data: PyramidLevel,
    stats: Vec<TargetStats>,
}

struct Artifacts {
    dir: PathBuf,
    metrics: MetricsWriter,
    densify_log: File,
}

impl Artifacts {
    fn create(dir: &Path, config: &TrainConfig, schedule: &Schedule) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let snapshot = serde_json::to_string_pretty(config).expect("config serializes");
        let p = dir.join("config.json");
        fs::write(&p, snapshot).map_err(|e| io_err(&p, e))?;
        let p = dir.join("schedule.txt");
        fs::write(&p, schedule.to_string()).map_err(|e| io_err(&p, e))?;
        let metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
        let p = dir.join("densify.log");
        let densify_log = File::create(&p).map_err(|e| io_err(&p, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            densify_log,
        })
    }

    fn log_event(&mut self, event: &DensifyEvent) -> Result<(), TrainError> {
        let p = self.dir.join("densify.log");
        writeln!(self.densify_log, "{event}").map_err(|e| io_err(&p, e))
    }
}

/// Trains a cloud on `dataset`. When `out_dir` is given, run artifacts are
/// written there: config snapshot, schedule, metrics CSV, densification log,
/// checkpoints and held-out renders.
pub fn train(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| TrainError::ThreadPool(e.to_string()))?;
    pool.install(|| train_inner(dataset, config, out_dir))
}

fn train_inner(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    let train_cams = dataset.train_cameras();
    let train_images: Vec<ImageBuffer> = dataset.train.iter().map(|&i| dataset.images[i].clone()).collect();
    let schedule = build_schedule(config, train_cams.len())?;
    let extent = scene_extent(&train_cams);
    let config_hash = config.hash();
    let mut artifacts = match out_dir {
        Some(dir) => Some(Artifacts::create(dir, config, &schedule)?),
        None => None,
    };

    let levels = schedule
        .entries
        .iter()
        .map(|e| {
            let data = PyramidLevel::build(e.factor, &train_cams, &train_images)?;
            let stats = data.images.iter().map(TargetStats::new).collect();
            Ok(Level { data, stats })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let mut cloud = initial_cloud(config, &train_cams);
    let mut adam = AdamState::new(&cloud);
    let lr = LrSchedule {
        rates: config.lr.clone(),
        scene_extent: extent,
        horizon: config.iterations,
    };
    let mut sampler = ViewSampler::new((0..train_cams.len()).collect(), config.seed);
    let mut densify = DensifyState::new(cloud.len(), extent, config.seed ^ 0xde75_1f7e);
    let params = DensifyParams::from_config(config);
    let last_level = schedule.entries.len() - 1;

    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let mut view_renders = 0;
    let mut final_eval = (f64::NAN, f64::NAN);
    for iter in 0..config.iterations {
        let it = iter + 1;
        let entry = *schedule.level_for_iteration(iter)?;
        let level = &levels[entry.level];
        let degree = if config.sh_degree_interval == 0 {
            config.sh_degree
        } else {
            config.sh_degree.min(iter / config.sh_degree_interval)
        };
        let settings = RenderSettings {
            sh_degree_active: degree,
            background: config.background,
        };

        let picked = sampler.sample(entry.views)?;
        let views: Vec<TrainView<'_>> = picked
            .iter()
            .map(|&v| TrainView {
                image: &level.data.images[v],
                camera: &level.data.cameras[v],
                stats: &level.stats[v],
            })
            .collect();
        let mut acc = accumulate_multiview(&cloud, &views, config.lambda, &settings, config.gradient_reduction)?;
        view_renders += views.len();

        let densifying = it <= config.densify_until && (config.densify_during_coarse || entry.level == last_level);
        if densifying {
            densify.accumulate(&acc.buffer);
        }
        adam_step(&mut cloud, &mut acc.buffer, &mut adam, &lr)?;

        if densifying && it > config.densify_from && it % config.densify_interval == 0 {
            let cams: Vec<&Camera> = views.iter().map(|v| v.camera).collect();
            let (beta_hat, r_bar) = if config.components.mvad && cams.len() >= 2 {
                let centers: Vec<Vector3<f64>> = cams.iter().map(|c| c.center()).collect();
                let d = pairwise_distances(&normalize_camera_translations(&centers));
                let (b, r) = adaptive_threshold(&d, config.beta, config.tau, config.distance_aggregate)
                    .expect("at least two views give distances");
                (b, Some(r))
            } else {
                (config.beta, None)
            };
            let regions = if config.components.crd && cams.len() >= 2 {
                let s = entry.factor as usize;
                let rays: Vec<_> = cams
                    .iter()
                    .zip(&acc.loss_maps)
                    .map(|(cam, map)| {
                        let h = (config.window.0 / s).clamp(1, map.height);
                        let w = (config.window.1 / s).clamp(1, map.width);
                        let win = select_loss_window(map, h, w).expect("window clamped to the map");
                        rays_from_window(cam, &win)
                    })
                    .collect();
                cross_ray_regions(&rays, config.epsilon * extent, config.cuboid_margin * extent)
            } else {
                Vec::new()
            };
            let outcome = densify_and_prune(&mut cloud, &mut densify, beta_hat, &regions, &params);
            adam.resize(&outcome.plan, cloud.coeffs_per_kernel());
            densify.regions = regions;
            let event = DensifyEvent {
                iteration: it,
                beta_hat,
                r_bar,
                regions: densify.regions.len(),
                cloned: outcome.cloned.len(),
                split: outcome.split.len(),
                pruned: outcome.pruned,
                kernels: cloud.len(),
            };
            log::debug!("{event}");
            if let Some(a) = artifacts.as_mut() {
                a.log_event(&event)?;
            }
            events.push(event);
        }
        if config.opacity_reset_interval > 0 && it % config.opacity_reset_interval == 0 && it <= config.densify_until {
            reset_opacity(&mut cloud);
            adam.reset_opacity_moments();
        }

        let eval_now = it == config.iterations || (config.eval_interval > 0 && it % config.eval_interval == 0);
        if eval_now {
            // Inactive bands are still zero, so rendering all bands is exact.
            let eval_settings = RenderSettings {
                sh_degree_active: config.sh_degree,
                background: config.background,
            };
            let (p, s) = evaluate(&cloud, dataset, &dataset.heldout, &eval_settings)?;
            final_eval = (p, s);
            let record = MetricsRecord {
                iter: it,
                level: entry.level,
                views_per_iter: entry.views,
                n_gaussians: cloud.len(),
                train_loss: acc.loss,
                val_psnr: p,
                val_ssim: s,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "iter {it} level {} views {} kernels {} loss {:.5} psnr {p:.3} ssim {s:.4}",
                entry.level,
                entry.views,
                cloud.len(),
                acc.loss
            );
            if let Some(a) = artifacts.as_mut() {
                a.metrics.write(&record)?;
            }
            metrics.push(record);
        }
        if let Some(a) = artifacts.as_ref() {
            if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 && it != config.iterations {
                let ck = Checkpoint {
                    cloud: cloud.clone(),
                    iteration: it as u64,
                    config_hash: config_hash.clone(),
                };
                save_checkpoint(&a.dir.join(format!("checkpoints/iter_{it}.ply")), &ck)?;
            }
        }
    }

    if let Some(a) = artifacts.as_ref() {
        let ck = Checkpoint {
            cloud: cloud.clone(),
            iteration: config.iterations as u64,
            config_hash: config_hash.clone(),
        };
        save_checkpoint(&a.dir.join("point_cloud.ply"), &ck)?;
        let settings = RenderSettings {
            sh_degree_active: config.sh_degree,
            background: config.background,
        };
        for &v in &dataset.heldout {
            let (img, _) = forward_render(&cloud, &dataset.cameras[v], &settings)?;
            write_png(&a.dir.join(format!("renders/view_{v:03}.png")), &img)?;
        }
    }

    Ok(TrainOutcome {
        cloud,
        metrics,
        events,
        schedule,
        view_renders,
        final_psnr: final_eval.0,
        final_ssim: final_eval.1,
        config_hash,
    })
}
