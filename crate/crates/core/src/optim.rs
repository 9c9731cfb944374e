//! Multi-view gradient accumulation and the Adam optimizer.
//!
//! One optimizer step renders `M` distinct views, back-propagates each
//! view's loss and sums the per-view gradients before a single Adam update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::cloud::GaussianCloud;
use crate::config::{GradientReduction, LearningRates};
use crate::image::ImageBuffer;
use crate::loss::{combined_loss_with_stats, LossError, LossMap, TargetStats};
use crate::raster::{
    check_aux, for_each_kernel_grad, forward_render_unchecked, CloudGrads, ParamGradients, RasterError, RenderSettings,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("cannot draw {requested} distinct views from {available}")]
    MTooLarge { requested: usize, available: usize },
    #[error("at least one view is required")]
    NoViews,
    #[error("gradient shape does not match the cloud: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Draws distinct views from epoch-wise shuffled permutations.
#[derive(Debug, Clone)]
pub struct ViewSampler {
    views: Vec<usize>,
    rng: ChaCha8Rng,
    pending: Vec<usize>,
}

impl ViewSampler {
    /// `views` are the dataset indices eligible for sampling.
    pub fn new(views: Vec<usize>, seed: u64) -> Self {
        Self {
            views,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    fn reshuffle(&mut self) {
        let mut epoch = self.views.clone();
        epoch.shuffle(&mut self.rng);
        // `pending` is consumed from the back.
        epoch.reverse();
        self.pending = epoch;
    }

    /// Draws `m` distinct view indices. When an epoch runs out mid-draw the
    /// next epoch is shuffled and the draw completes from it, skipping views
    /// already taken; skipped views stay first in line.
    pub fn sample(&mut self, m: usize) -> Result<Vec<usize>, OptimError> {
        if m > self.views.len() {
            return Err(OptimError::MTooLarge {
                requested: m,
                available: self.views.len(),
            });
        }
        if m == 0 {
            return Err(OptimError::NoViews);
        }
        let mut drawn = Vec::with_capacity(m);
        while drawn.len() < m {
            if self.pending.is_empty() {
                self.reshuffle();
                let mut deferred = Vec::new();
                while drawn.len() < m {
                    let v = self.pending.pop().expect("epoch holds at least m views");
                    if drawn.contains(&v) {
                        deferred.push(v);
                    } else {
                        drawn.push(v);
                    }
                }
                self.pending.extend(deferred.into_iter().rev());
            } else {
                drawn.push(self.pending.pop().unwrap());
            }
        }
        Ok(drawn)
    }
}

/// Summed gradients plus the view-space statistics used by densification.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub params: CloudGrads,
    /// Sum over views of the NDC-scaled projected-mean gradient norm.
    pub view_grad_norm: Vec<f64>,
    /// Number of views each kernel projected into.
    pub touch_count: Vec<u32>,
    /// Largest projected radius seen, as a fraction of the image size.
    pub max_screen_radius: Vec<f64>,
    pub views: usize,
}

impl GradientBuffer {
    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            params: CloudGrads::zeros_like(cloud),
            view_grad_norm: vec![0.0; n],
            touch_count: vec![0; n],
            max_screen_radius: vec![0.0; n],
            views: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds one view's gradients; `(width, height)` are the view's image size.
    pub fn add_view(&mut self, g: &ParamGradients, width: usize, height: usize) {
        self.params.add_assign(&g.params);
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..self.view_grad_norm.len() {
            if g.screen_radius[i] > 0.0 {
                let [gu, gv] = g.mean2d[i];
                self.view_grad_norm[i] += (gu * sx).hypot(gv * sy);
                self.touch_count[i] += 1;
            }
            self.max_screen_radius[i] = self.max_screen_radius[i].max(g.screen_radius[i]);
        }
        self.views += 1;
    }

    /// Elementwise sum with another buffer over the same cloud.
    pub fn merge(&mut self, other: &GradientBuffer) {
        self.params.add_assign(&other.params);
        for i in 0..self.view_grad_norm.len() {
            self.view_grad_norm[i] += other.view_grad_norm[i];
            self.touch_count[i] += other.touch_count[i];
            self.max_screen_radius[i] = self.max_screen_radius[i].max(other.max_screen_radius[i]);
        }
        self.views += other.views;
    }

    pub fn reset(&mut self) {
        self.params.fill_zero();
        self.view_grad_norm.iter_mut().for_each(|v| *v = 0.0);
        self.touch_count.iter_mut().for_each(|v| *v = 0);
        self.max_screen_radius.iter_mut().for_each(|v| *v = 0.0);
        self.views = 0;
    }
}

/// One supervised view: target image, camera and cached target statistics.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub image: &'a ImageBuffer,
    pub camera: &'a Camera,
    pub stats: &'a TargetStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accumulated {
    pub buffer: GradientBuffer,
    /// Mean of the per-view scalar losses.
    pub loss: f64,
    pub loss_maps: Vec<LossMap>,
}

/// Renders every view, back-propagates its loss and sums the gradients in
/// view order.
pub fn accumulate_multiview(
    cloud: &GaussianCloud,
    views: &[TrainView<'_>],
    lambda: f64,
    settings: &RenderSettings,
    reduction: GradientReduction,
) -> Result<Accumulated, OptimError> {
    if views.is_empty() {
        return Err(OptimError::NoViews);
    }
    cloud.validate().map_err(RasterError::from)?;
    let mut buffer = GradientBuffer::zeros_like(cloud);
    let mut loss_maps = Vec::with_capacity(views.len());
    let mut loss = 0.0;
    let stride = cloud.coeffs_per_kernel();
    for view in views {
        let (rendered, aux) = forward_render_unchecked(cloud, view.camera, settings)?;
        let out = combined_loss_with_stats(&rendered, view.image, view.stats, lambda)?;
        check_aux(cloud, view.camera, &aux, &out.grad)?;
        // Same sums as `add_view(&backward_render(..))` without the
        // full-cloud temporaries.
        let (w, h) = rendered.dims();
        let screen = w.max(h) as f64;
        for pk in aux.projected() {
            let i = pk.index as usize;
            buffer.touch_count[i] += 1;
            buffer.max_screen_radius[i] = buffer.max_screen_radius[i].max(pk.radius / screen);
        }
        let (sx, sy) = (0.5 * w as f64, 0.5 * h as f64);
        let p = &mut buffer.params;
        let norms = &mut buffer.view_grad_norm;
        for_each_kernel_grad(cloud, view.camera, &aux, &out.grad, |i, kg| {
            let [gu, gv] = kg.mean2d;
            norms[i] += (gu * sx).hypot(gv * sy);
            for k in 0..3 {
                p.positions[i][k] += kg.position[k];
                p.log_scales[i][k] += kg.log_scale[k];
            }
            for k in 0..4 {
                p.rotations[i][k] += kg.rotation[k];
            }
            p.opacity_logits[i] += kg.opacity_logit;
            for (d, g) in p.color_coeffs[i * stride..(i + 1) * stride].iter_mut().zip(&kg.coeffs) {
                *d += g;
            }
        })?;
        buffer.views += 1;
        loss += out.value;
        loss_maps.push(out.map);
    }
    if reduction == GradientReduction::Mean {
        buffer.params.scale(1.0 / views.len() as f64);
    }
    Ok(Accumulated {
        buffer,
        loss: loss / views.len() as f64,
        loss_maps,
    })
}

/// Learning rate per parameter group at a given step.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub rates: LearningRates,
    pub scene_extent: f64,
    /// Steps over which the position rate decays from initial to final.
    pub horizon: usize,
}

impl LrSchedule {
    /// Log-linear decay of the position rate, scaled by the scene extent.
    pub fn position_lr(&self, step: usize) -> f64 {
        let t = if self.horizon == 0 {
            1.0
        } else {
            (step as f64 / self.horizon as f64).clamp(0.0, 1.0)
        };
        let (a, b) = (self.rates.position_init.ln(), self.rates.position_final.ln());
        (a + (b - a) * t).exp() * self.scene_extent
    }
}

/// First and second moment estimates for every attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: CloudGrads,
    pub v: CloudGrads,
    pub step: u64,
}

/// Maps each kernel of the resized cloud to the kernel it came from, if it
/// is a survivor; new kernels have no source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResizePlan {
    pub sources: Vec<Option<usize>>,
}

impl ResizePlan {
    pub fn identity(n: usize) -> Self {
        Self {
            sources: (0..n).map(Some).collect(),
        }
    }
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        Self {
            m: CloudGrads::zeros_like(cloud),
            v: CloudGrads::zeros_like(cloud),
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Reorders moments to follow a densification event: survivors keep
    /// their moments, new kernels start at zero.
    pub fn resize(&mut self, plan: &ResizePlan, coeffs_per_kernel: usize) {
        let remap = |old: &CloudGrads| {
            let mut out = CloudGrads::zeros(plan.sources.len(), coeffs_per_kernel);
            for (new, src) in plan.sources.iter().enumerate() {
                if let Some(i) = *src {
                    out.positions[new] = old.positions[i];
                    out.rotations[new] = old.rotations[i];
                    out.log_scales[new] = old.log_scales[i];
                    out.opacity_logits[new] = old.opacity_logits[i];
                    out.color_coeffs[new * coeffs_per_kernel..(new + 1) * coeffs_per_kernel]
                        .copy_from_slice(&old.color_coeffs[i * coeffs_per_kernel..(i + 1) * coeffs_per_kernel]);
                }
            }
            out
        };
        self.m = remap(&self.m);
        self.v = remap(&self.v);
    }

    /// Zeroes the moments of the opacity group (used after an opacity reset).
    pub fn reset_opacity_moments(&mut self) {
        self.m.opacity_logits.iter_mut().for_each(|v| *v = 0.0);
        self.v.opacity_logits.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[inline]
fn adam_update(param: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *param -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

fn update_group(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64) {
    for i in 0..params.len() {
        adam_update(&mut params[i], grads[i], &mut m[i], &mut v[i], lr, c1, c2);
    }
}

/// Applies one bias-corrected Adam update and zeroes the buffer.
pub fn adam_step(
    cloud: &mut GaussianCloud,
    buffer: &mut GradientBuffer,
    state: &mut AdamState,
    schedule: &LrSchedule,
) -> Result<(), OptimError> {
    let n = cloud.len();
    let stride = cloud.coeffs_per_kernel();
    if buffer.len() != n || state.len() != n || buffer.params.color_coeffs.len() != n * stride {
        return Err(OptimError::ShapeMismatch(format!(
            "cloud {n}, buffer {}, optimizer {}",
            buffer.len(),
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let rates = &schedule.rates;
    let g = &buffer.params;

    update_group(
        cloud.positions.as_flattened_mut(),
        g.positions.as_flattened(),
        state.m.positions.as_flattened_mut(),
        state.v.positions.as_flattened_mut(),
        schedule.position_lr(state.step as usize - 1),
        c1,
        c2,
    );
    update_group(
        cloud.rotations.as_flattened_mut(),
        g.rotations.as_flattened(),
        state.m.rotations.as_flattened_mut(),
        state.v.rotations.as_flattened_mut(),
        rates.rotation,
        c1,
        c2,
    );
    update_group(
        cloud.log_scales.as_flattened_mut(),
        g.log_scales.as_flattened(),
        state.m.log_scales.as_flattened_mut(),
        state.v.log_scales.as_flattened_mut(),
        rates.scale,
        c1,
        c2,
    );
    update_group(
        &mut cloud.opacity_logits,
        &g.opacity_logits,
        &mut state.m.opacity_logits,
        &mut state.v.opacity_logits,
        rates.opacity,
        c1,
        c2,
    );
    for i in 0..cloud.color_coeffs.len() {
        let lr = if i % stride < 3 {
            rates.color_dc
        } else {
            rates.color_rest
        };
        adam_update(
            &mut cloud.color_coeffs[i],
            g.color_coeffs[i],
            &mut state.m.color_coeffs[i],
            &mut state.v.color_coeffs[i],
            lr,
            c1,
            c2,
        );
    }
    buffer.reset();
    Ok(())
}
