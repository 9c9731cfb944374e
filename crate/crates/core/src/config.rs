use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// The four method components that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Multi-view regulated learning: `M > 1` views per optimizer step.
    pub mvrl: bool,
    /// Cross-ray densification boost inside multi-view overlap cuboids.
    pub crd: bool,
    /// Multi-view augmented densification threshold.
    pub mvad: bool,
    /// Cross-intrinsic coarse-to-fine pyramid.
    pub cig: bool,
}

impl Components {
    pub const ALL: Self = Self {
        mvrl: true,
        crd: true,
        mvad: true,
        cig: true,
    };
    pub const NONE: Self = Self {
        mvrl: false,
        crd: false,
        mvad: false,
        cig: false,
    };

    /// Parses a comma-separated list of component names to disable.
    pub fn disabling(list: &str) -> Result<Self, ConfigError> {
        let mut components = Self::ALL;
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "mvrl" => components.mvrl = false,
                "crd" => components.crd = false,
                "mvad" => components.mvad = false,
                "cig" => components.cig = false,
                other => return Err(ConfigError(format!("unknown component `{other}`"))),
            }
        }
        Ok(components)
    }
}

/// How per-view gradients are combined within one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientReduction {
    Sum,
    Mean,
}

/// How the pairwise camera distances are reduced to one threshold decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceAggregate {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Initial and final position rates, in units of the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color_dc: f64,
    pub color_rest: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color_dc: 2.5e-3,
            color_rest: 2.5e-3 / 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dataset directory, recorded so the snapshot alone reproduces a run.
    #[serde(default)]
    pub dataset: Option<String>,
    pub iterations: usize,
    /// Weight of the D-SSIM term in the training loss.
    pub lambda: f64,
    /// Downsampling factors, coarsest first, ending at 1.
    pub pyramid: Vec<u32>,
    /// Views per iteration for each pyramid level.
    pub views_per_level: Vec<usize>,
    /// Iteration budget of every level except the last, which takes the rest.
    pub coarse_iters: usize,
    pub components: Components,
    pub gradient_reduction: GradientReduction,

    pub beta: f64,
    pub tau: f64,
    pub distance_aggregate: DistanceAggregate,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_during_coarse: bool,
    pub prune_opacity: f64,
    pub opacity_reset_interval: usize,
    /// Clone/split scale cut as a fraction of the scene extent.
    pub percent_dense: f64,
    pub split_scale_divisor: f64,
    /// Prune kernels whose projected radius exceeded this fraction of the image.
    pub max_screen_fraction: f64,
    /// Loss window `(h, w)` in full-resolution pixels.
    pub window: (usize, usize),
    /// Ray closeness tolerance as a fraction of the scene extent.
    pub epsilon: f64,
    /// Cuboid inflation per side as a fraction of the scene extent.
    pub cuboid_margin: f64,

    pub lr: LearningRates,
    pub sh_degree: usize,
    /// Iterations between raising the active SH degree by one.
    pub sh_degree_interval: usize,
    pub background: [f64; 3],

    /// Number of randomly initialized kernels.
    pub init_points: usize,
    /// Radius of the initialization ball as a fraction of the scene extent.
    pub init_radius: f64,

    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub threads: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            iterations: 30_000,
            lambda: 0.2,
            pyramid: vec![8, 4, 2, 1],
            views_per_level: vec![48, 24, 12, 8],
            coarse_iters: 2000,
            components: Components::ALL,
            gradient_reduction: GradientReduction::Sum,
            beta: 2e-4,
            tau: 1.0,
            distance_aggregate: DistanceAggregate::Mean,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15_000,
            densify_during_coarse: true,
            prune_opacity: 0.005,
            opacity_reset_interval: 3000,
            percent_dense: 0.01,
            split_scale_divisor: 1.6,
            max_screen_fraction: 0.8,
            window: (64, 64),
            epsilon: 0.02,
            cuboid_margin: 0.01,
            lr: LearningRates::default(),
            sh_degree: 2,
            sh_degree_interval: 1000,
            background: [0.0; 3],
            init_points: 4000,
            init_radius: 1.0 / 3.0,
            eval_interval: 1000,
            checkpoint_interval: 0,
            seed: 0,
            threads: 1,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// Defaults scaled for short synthetic runs: 5k iterations with 500
    /// iterations per coarse level. Densification stops halfway, and the
    /// threshold is raised for small images, where the base one keeps
    /// splitting long after the scene is covered.
    pub fn desk_scale() -> Self {
        Self {
            iterations: 5000,
            coarse_iters: 500,
            beta: 1e-3,
            densify_until: 2500,
            opacity_reset_interval: 1000,
            eval_interval: 500,
            ..Self::default()
        }
    }

    /// SHA-256 of the JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if self.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta {} must be positive", self.beta));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if self.pyramid.is_empty() || self.pyramid.len() != self.views_per_level.len() {
            return fail(format!(
                "pyramid has {} levels but {} view counts",
                self.pyramid.len(),
                self.views_per_level.len()
            ));
        }
        if self.pyramid.windows(2).any(|w| w[0] <= w[1]) || self.pyramid.last() != Some(&1) {
            return fail(format!(
                "pyramid factors {:?} must strictly decrease to 1",
                self.pyramid
            ));
        }
        if self.views_per_level.contains(&0) {
            return fail("views per iteration must be at least 1".into());
        }
        if self.sh_degree > crate::cloud::MAX_SH_DEGREE {
            return fail(format!("SH degree {} exceeds 3", self.sh_degree));
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return fail("loss window must be non-empty".into());
        }
        if self.densify_interval == 0 {
            return fail("densify interval must be positive".into());
        }
        if !(self.epsilon > 0.0) || !(self.split_scale_divisor > 0.0) {
            return fail("epsilon and split divisor must be positive".into());
        }
        Ok(())
    }
}
