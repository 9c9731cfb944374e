mod args;

use std::fs::{self, OpenOptions};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Parser;
use serde::Serialize;

use args::{AblateArgs, Cli, Command, EvalArgs, RenderArgs, SynthArgs, TrainArgs};
use mvgs::ablate::{ladder_configs, run_ablation};
use mvgs::config::TrainConfig;
use mvgs::loss;
use mvgs::pyramid::build_schedule;
use mvgs::raster::{forward_render, RenderSettings};
use mvgs::sceneio::{
    generate_synthetic_scene, load_checkpoint, load_dataset, parse_cameras, save_checkpoint, save_dataset, write_png,
    Checkpoint, Dataset,
};
use mvgs::train::train;

/// The flags parsed but describe an unusable run; exits with 2 like a
/// parse failure.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Checks everything about `config` that does not depend on the dataset.
fn check_config(config: &TrainConfig) -> Result<()> {
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    build_schedule(config, usize::MAX).map_err(|e| UsageError(e.to_string()))?;
    Ok(())
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = a.flags.to_config()?;
    config.dataset = Some(a.data.display().to_string());
    check_config(&config)?;
    let dataset = open_dataset(&a.data)?;
    let outcome = train(&dataset, &config, Some(&a.out))?;
    println!(
        "final held-out psnr {:.4} ssim {:.5} kernels {} view renders {}",
        outcome.final_psnr,
        outcome.final_ssim,
        outcome.cloud.len(),
        outcome.view_renders
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cameras = match (&a.data, &a.cameras) {
        (Some(dir), _) => open_dataset(dir)?.cameras,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_cameras(&text)?.1
        }
        (None, None) => unreachable!("clap requires one camera source"),
    };
    let camera = cameras
        .get(a.view)
        .with_context(|| format!("view {} out of range for {} cameras", a.view, cameras.len()))?;
    let settings = RenderSettings {
        sh_degree_active: a.sh_degree.unwrap_or(ck.cloud.sh_degree),
        background: [0.0; 3],
    };
    let (img, _) = forward_render(&ck.cloud, camera, &settings)?;
    write_png(&a.out, &img)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    checkpoint: String,
    iteration: u64,
    n_gaussians: usize,
    views: usize,
    val_psnr: f64,
    val_ssim: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let dataset = open_dataset(&a.data)?;
    if dataset.heldout.is_empty() {
        anyhow::bail!("dataset {} has no held-out views", a.data.display());
    }
    let settings = RenderSettings {
        sh_degree_active: ck.cloud.sh_degree,
        background: [0.0; 3],
    };
    // Scored as the 8-bit PNG `render` would write, so the numbers can be
    // recomputed from rendered files.
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for &v in &dataset.heldout {
        let (img, _) = forward_render(&ck.cloud, &dataset.cameras[v], &settings)?;
        let img = img.quantized();
        psnr += loss::psnr(&img, &dataset.images[v])?;
        ssim += loss::ssim(&img, &dataset.images[v])?;
    }
    let n = dataset.heldout.len() as f64;
    let (psnr, ssim) = (psnr / n, ssim / n);
    println!("psnr {psnr:.4} ssim {ssim:.5} views {}", dataset.heldout.len());
    if let Some(path) = &a.csv {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(EvalRow {
            checkpoint: a.checkpoint.display().to_string(),
            iteration: ck.iteration,
            n_gaussians: ck.cloud.len(),
            views: dataset.heldout.len(),
            val_psnr: psnr,
            val_ssim: ssim,
        })?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.kernels == 0 || a.views < a.heldout + 2 || a.size == 0 {
        return Err(UsageError(format!(
            "need at least one kernel, a positive size and two more views than held-out ({} views, {} held out)",
            a.views, a.heldout
        ))
        .into());
    }
    let (cloud, dataset) = generate_synthetic_scene(a.seed, a.kernels, a.views, a.size, a.heldout);
    save_dataset(&a.out, &dataset)?;
    if let Some(path) = &a.ground_truth {
        let ck = Checkpoint {
            cloud,
            iteration: 0,
            config_hash: String::new(),
        };
        save_checkpoint(path, &ck)?;
    }
    println!("wrote {} views to {}", dataset.len(), a.out.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut base = a.flags.to_config()?;
    base.dataset = Some(a.data.display().to_string());
    check_config(&base)?;
    if a.seeds.is_empty() {
        return Err(UsageError("no seeds given".into()).into());
    }
    let dataset = open_dataset(&a.data)?;
    // Surface budget problems before the first run starts.
    ladder_configs(&base, a.fairness.into(), a.budget, dataset.train.len())?;
    let start = Instant::now();
    let rows = run_ablation(&dataset, &base, &a.seeds, a.fairness.into(), a.budget, Some(&a.out))?;
    for r in &rows {
        println!(
            "{:<9} seed {:<3} iters {:<6} renders {:<7} kernels {:<7} psnr {:.4} ssim {:.5}",
            r.config, r.seed, r.iterations, r.view_renders, r.n_gaussians, r.final_psnr, r.final_ssim
        );
    }
    log::info!("ablation finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
