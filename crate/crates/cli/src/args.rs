use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvgs::ablate::Fairness;
use mvgs::config::{Components, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "mvgs", version, about = "Multi-view regulated Gaussian splatting on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a cloud on a dataset directory.
    Train(TrainArgs),
    /// Render one view of a checkpoint to PNG.
    Render(RenderArgs),
    /// Held-out PSNR/SSIM of a checkpoint.
    Eval(EvalArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Run the component ladder under a shared budget.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 30k iterations, 2000 per coarse level.
    Standard,
    /// 5k iterations, 500 per coarse level.
    Desk,
}

/// Training flags shared by `train` and `ablate`. Unset flags keep the preset.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, value_enum, default_value = "standard", conflicts_with = "config")]
    pub preset: Preset,
    /// Start from a saved config snapshot instead of a preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Views per iteration at each pyramid level, e.g. 48,24,12,8.
    #[arg(long, value_delimiter = ',')]
    pub views_per_iter_schedule: Option<Vec<usize>>,
    /// Downsampling factors, coarsest first, e.g. 8,4,2,1.
    #[arg(long, value_delimiter = ',')]
    pub pyramid: Option<Vec<u32>>,
    #[arg(long)]
    pub coarse_iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Loss window as HxW in full-resolution pixels.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<(usize, usize)>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
    #[arg(long)]
    pub densify_until: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    /// Components to switch off: any of mvrl,crd,mvad,cig.
    #[arg(long, value_parser = parse_components)]
    pub disable: Option<Components>,
}

impl TrainFlags {
    pub fn to_config(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, Preset::Standard) => TrainConfig::default(),
            (None, Preset::Desk) => TrainConfig::desk_scale(),
        };
        if let Some(v) = self.iters {
            c.iterations = v;
        }
        if let Some(v) = &self.views_per_iter_schedule {
            c.views_per_level = v.clone();
        }
        if let Some(v) = &self.pyramid {
            c.pyramid = v.clone();
        }
        if let Some(v) = self.coarse_iters {
            c.coarse_iters = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.sh_degree {
            c.sh_degree = v;
        }
        if let Some(v) = self.densify_until {
            c.densify_until = v;
        }
        if let Some(v) = self.eval_interval {
            c.eval_interval = v;
        }
        if let Some(v) = self.checkpoint_interval {
            c.checkpoint_interval = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        if self.deterministic {
            c.deterministic = true;
        }
        if let Some(v) = self.disable {
            c.components = v;
        }
        Ok(c)
    }
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("window height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("window width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("window sides must be positive".into());
    }
    Ok((h, w))
}

fn parse_components(s: &str) -> Result<Components, String> {
    Components::disabling(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory containing cameras.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory to take the camera from.
    #[arg(long, required_unless_present = "cameras", conflicts_with = "cameras")]
    pub data: Option<PathBuf>,
    /// A cameras.json file to take the camera from; images need not exist.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Index of the view in the camera list.
    #[arg(long)]
    pub view: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Bands to evaluate; defaults to all stored in the checkpoint.
    #[arg(long)]
    pub sh_degree: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Append the result row to this CSV, writing the header if new.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub kernels: usize,
    #[arg(long, default_value_t = 64)]
    pub views: usize,
    #[arg(long, default_value_t = 128)]
    pub size: u32,
    #[arg(long, default_value_t = 8)]
    pub heldout: usize,
    /// Also write the ground-truth cloud as a checkpoint.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FairnessArg {
    ViewRenders,
    Iterations,
}

impl From<FairnessArg> for Fairness {
    fn from(f: FairnessArg) -> Self {
        match f {
            FairnessArg::ViewRenders => Fairness::ViewRenders,
            FairnessArg::Iterations => Fairness::Iterations,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training seeds; every ladder row runs once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Total view renders per row; defaults to what the full configuration spends.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum, default_value = "view-renders")]
    pub fairness: FairnessArg,
    #[command(flatten)]
    pub flags: TrainFlags,
}
