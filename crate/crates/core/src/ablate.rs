//! The component ladder: baseline, then MVRL, CRD, MVAD and CIG switched on
//! one at a time, each run under the same training budget.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Components, TrainConfig};
use crate::pyramid::{build_schedule, Schedule};
use crate::sceneio::{Dataset, SceneError};
use crate::train::{train, TrainError, TrainOutcome};

/// What is held equal across ladder rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fairness {
    /// Total forward+backward view renders, `Σ M·iterations`.
    ViewRenders,
    /// Optimizer steps.
    Iterations,
}

pub const LADDER: [(&str, Components); 5] = [
    ("baseline", Components::NONE),
    (
        "+mvrl",
        Components {
            mvrl: true,
            crd: false,
            mvad: false,
            cig: false,
        },
    ),
    (
        "+crd",
        Components {
            mvrl: true,
            crd: true,
            mvad: false,
            cig: false,
        },
    ),
    (
        "+mvad",
        Components {
            mvrl: true,
            crd: true,
            mvad: true,
            cig: false,
        },
    ),
    ("full", Components::ALL),
];

/// View renders a schedule spends.
pub fn schedule_renders(schedule: &Schedule) -> usize {
    schedule.entries.iter().map(|e| e.views * (e.end - e.start)).sum()
}

fn scale(value: usize, num: usize, den: usize) -> usize {
    ((value as u128 * num as u128 + den as u128 / 2) / den as u128) as usize
}

/// `base` with `components`, its iteration count chosen so the run spends
/// `budget` view renders. Iteration-based settings (densification window and
/// interval, opacity reset, SH warm-up, eval and checkpoint cadence) stretch
/// by the same ratio. Coarse pyramid iterations stay fixed; only the finest
/// level absorbs the difference. When the remainder does not divide evenly
/// the run spends slightly less than `budget`.
pub fn budget_config(
    base: &TrainConfig,
    components: Components,
    budget: usize,
    train_views: usize,
) -> Result<TrainConfig, TrainError> {
    let mut config = TrainConfig {
        components,
        ..base.clone()
    };
    let schedule = build_schedule(&config, train_views)?;
    let last = schedule.entries.last().expect("schedules have a level");
    let coarse_renders = schedule_renders(&schedule) - last.views * (last.end - last.start);
    if budget <= coarse_renders {
        return Err(TrainError::Config(crate::config::ConfigError(format!(
            "budget of {budget} view renders does not cover the {coarse_renders} coarse renders"
        ))));
    }
    let iterations = last.start + (budget - coarse_renders) / last.views;
    let (num, den) = (iterations, base.iterations);
    config.iterations = iterations;
    config.densify_from = scale(base.densify_from, num, den);
    config.densify_until = scale(base.densify_until, num, den);
    config.densify_interval = scale(base.densify_interval, num, den).max(1);
    config.opacity_reset_interval = scale(base.opacity_reset_interval, num, den);
    config.sh_degree_interval = scale(base.sh_degree_interval, num, den);
    config.eval_interval = scale(base.eval_interval, num, den);
    config.checkpoint_interval = scale(base.checkpoint_interval, num, den);
    Ok(config)
}

/// Per-row configurations of the ladder. The default budget is what the full
/// configuration spends at `base.iterations`.
pub fn ladder_configs(
    base: &TrainConfig,
    fairness: Fairness,
    budget: Option<usize>,
    train_views: usize,
) -> Result<Vec<(&'static str, TrainConfig)>, TrainError> {
    let budget = match budget {
        Some(b) => b,
        None => {
            let full = TrainConfig {
                components: Components::ALL,
                ..base.clone()
            };
            schedule_renders(&build_schedule(&full, train_views)?)
        }
    };
    LADDER
        .iter()
        .map(|&(name, components)| {
            let config = match fairness {
                Fairness::ViewRenders => budget_config(base, components, budget, train_views)?,
                Fairness::Iterations => TrainConfig {
                    components,
                    ..base.clone()
                },
            };
            Ok((name, config))
        })
        .collect()
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub iterations: usize,
    pub view_renders: usize,
    pub n_gaussians: usize,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub wall_seconds: f64,
}

impl AblationRow {
    pub fn new(name: &str, config: &TrainConfig, outcome: &TrainOutcome, wall_seconds: f64) -> Self {
        Self {
            config: name.to_string(),
            seed: config.seed,
            iterations: config.iterations,
            view_renders: outcome.view_renders,
            n_gaussians: outcome.cloud.len(),
            final_psnr: outcome.final_psnr,
            final_ssim: outcome.final_ssim,
            wall_seconds,
        }
    }
}

/// Runs every ladder row for every seed. With `out_dir`, each run writes its
/// artifacts to `<out_dir>/<config>_seed<seed>` and the rows go to
/// `<out_dir>/ablation.csv`.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    fairness: Fairness,
    budget: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, TrainError> {
    let configs = ladder_configs(base, fairness, budget, dataset.train.len())?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, config) in &configs {
            let config = TrainConfig { seed, ..config.clone() };
            let run_dir = out_dir.map(|d| d.join(format!("{}_seed{seed}", name.trim_start_matches('+'))));
            let start = Instant::now();
            let outcome = train(dataset, &config, run_dir.as_deref())?;
            let row = AblationRow::new(name, &config, &outcome, start.elapsed().as_secs_f64());
            log::info!("{} seed {seed}: psnr {:.3}", row.config, row.final_psnr);
            rows.push(row);
        }
    }
    if let Some(dir) = out_dir {
        write_rows(&dir.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<(), SceneError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SceneError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| SceneError::io(path, e))?;
    }
    w.flush().map_err(|e| SceneError::io(path, e))
}

/// Median of the final PSNRs of rows named `config`.
pub fn median_psnr(rows: &[AblationRow], config: &str) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.config == config)
        .map(|r| r.final_psnr)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
