//! Radiance field optimization: uniform ray batches drawn from every view's
//! current image, an L1 photometric loss plus an optional patch-level
//! perceptual term, and Adam with global-norm gradient clipping.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Checkpoint, OptimizerSnapshot, RadianceFieldParams, RngSnapshot};
use crate::image::{pyramid_reduce, pyramid_reduce_adjoint, Image, Rgb};
use crate::renderer::{
    pixel_ray, render_rays, render_rays_vjp, render_rays_with_cotangent, Ray, RaySampleSpec,
};
use crate::scene_io::SceneDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l1_weight: f64,
    pub perceptual_weight: f64,
    /// Side of the square window rendered for the perceptual term.
    pub patch_size: u32,
    pub samples_per_ray: usize,
    /// Global gradient norm clip.
    pub grad_clip: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_rays: 1024,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l1_weight: 1.0,
            perceptual_weight: 0.0,
            patch_size: 32,
            samples_per_ray: 64,
            grad_clip: 10.0,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_rays >= 1
            && self.l1_weight >= 0.0
            && self.perceptual_weight >= 0.0
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.patch_size >= 1
            && self.samples_per_ray >= 2
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Adam moment estimates and the bias-correction step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.first_moment.iter_mut().for_each(|v| *v = 0.0);
        self.second_moment.iter_mut().for_each(|v| *v = 0.0);
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: RadianceFieldParams,
    pub adam: AdamState,
    /// Total optimizer steps taken, across re-initializations.
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: RadianceFieldParams, rng_seed: u64) -> Self {
        let n = params.len();
        Self {
            params,
            adam: AdamState::new(n),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            iteration: self.iteration,
            optimizer: Some(OptimizerSnapshot {
                step: self.adam.step,
                first_moment: self.adam.first_moment.clone(),
                second_moment: self.adam.second_moment.clone(),
            }),
            rng: Some(RngSnapshot {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            }),
        }
    }

    /// Restores a state; missing optimizer or RNG sections start fresh (the
    /// RNG from `fallback_seed`).
    pub fn from_checkpoint(checkpoint: Checkpoint, fallback_seed: u64) -> Self {
        let n = checkpoint.params.len();
        let adam = match checkpoint.optimizer {
            Some(o) if o.first_moment.len() == n && o.second_moment.len() == n => AdamState {
                step: o.step,
                first_moment: o.first_moment,
                second_moment: o.second_moment,
            },
            _ => AdamState::new(n),
        };
        let rng = match checkpoint.rng {
            Some(r) => {
                let mut rng = ChaCha8Rng::from_seed(r.seed);
                rng.set_stream(r.stream);
                rng.set_word_pos(r.word_pos);
                rng
            }
            None => ChaCha8Rng::seed_from_u64(fallback_seed),
        };
        Self {
            params: checkpoint.params,
            adam,
            iteration: checkpoint.iteration,
            rng,
        }
    }
}

/// Zeroes the Adam moments and its bias-correction counter. Parameters and
/// the global iteration count are untouched.
pub fn reinit_optimizer(state: &mut TrainState) {
    state.adam.reset();
}

/// Rays with their supervision colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<Rgb>,
}

/// Draws `n` rays uniformly over all `(view, pixel)` pairs; targets come
/// from each view's current image.
pub fn sample_ray_batch<R: Rng + ?Sized>(
    dataset: &SceneDataset,
    n: usize,
    rng: &mut R,
) -> Result<RayBatch> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cumulative = Vec::with_capacity(dataset.len());
    let mut total = 0usize;
    for v in dataset.views() {
        total += v.current().len();
        cumulative.push(total);
    }
    let mut rays = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(0..total);
        let view_idx = cumulative.partition_point(|&c| c <= idx);
        let view = &dataset.views()[view_idx];
        let local = idx
            - if view_idx == 0 {
                0
            } else {
                cumulative[view_idx - 1]
            };
        let w = view.current().width() as usize;
        let (x, y) = ((local % w) as u32, (local / w) as u32);
        let mut ray = pixel_ray(view.camera(), x, y)?;
        ray.view_id = Some(view.view_id());
        rays.push(ray);
        targets.push(view.current().get(x, y));
    }
    Ok(RayBatch { rays, targets })
}

/// An image-level loss between a rendered patch and its target.
pub trait PerceptualLoss: Send + Sync {
    /// Returns the loss and its gradient with respect to `rendered`.
    fn loss_and_grad(&self, rendered: &Image, target: &Image) -> Result<(f64, Image)>;
}

/// Sum over Gaussian pyramid levels of the mean absolute difference.
#[derive(Clone, Debug)]
pub struct PyramidL1 {
    pub levels: usize,
}

impl Default for PyramidL1 {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

impl PerceptualLoss for PyramidL1 {
    fn loss_and_grad(&self, rendered: &Image, target: &Image) -> Result<(f64, Image)> {
        rendered.ensure_same_dims(target)?;
        let mut r_levels = vec![rendered.clone()];
        let mut t_levels = vec![target.clone()];
        for _ in 1..self.levels.max(1) {
            let (r, t) = (r_levels.last().unwrap(), t_levels.last().unwrap());
            let (nr, nt) = (pyramid_reduce(r), pyramid_reduce(t));
            r_levels.push(nr);
            t_levels.push(nt);
        }
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(r_levels.len());
        for (r, t) in r_levels.iter().zip(&t_levels) {
            let count = (3 * r.len()) as f64;
            loss += r.mean_abs_diff(t)?;
            let pixels = r
                .pixels()
                .iter()
                .zip(t.pixels())
                .map(|(a, b)| std::array::from_fn(|c| sign(a[c] - b[c]) / count))
                .collect();
            grads.push(Image::from_pixels(r.width(), r.height(), pixels)?);
        }
        // Back-propagate from the coarsest level down.
        let mut carry = grads.pop().expect("at least one level");
        while let Some(finer) = grads.pop() {
            let up = pyramid_reduce_adjoint(&carry, finer.width(), finer.height());
            let pixels = finer
                .pixels()
                .iter()
                .zip(up.pixels())
                .map(|(a, b)| std::array::from_fn(|c| a[c] + b[c]))
                .collect();
            carry = Image::from_pixels(finer.width(), finer.height(), pixels)?;
        }
        Ok((loss, carry))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-step summary; `Display` gives the training log line format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f64,
    /// PSNR of the ray batch against its targets.
    pub psnr: f64,
}

impl fmt::Display for StepStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} loss={:.6} psnr={:.3}",
            self.iteration, self.loss, self.psnr
        )
    }
}

pub(crate) fn training_spec(
    dataset: &SceneDataset,
    config: &TrainConfig,
    seed: u64,
) -> RaySampleSpec {
    RaySampleSpec {
        n_samples: config.samples_per_ray,
        stratified: true,
        near: dataset.near,
        far: dataset.far,
        rng_seed: seed,
        background: dataset.background,
    }
}

/// Rescales `grad` to at most `max_norm`, returning the original norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One optimization step with the default pyramid perceptual loss.
pub fn train_step(
    state: &mut TrainState,
    dataset: &SceneDataset,
    config: &TrainConfig,
) -> Result<StepStats> {
    train_step_with(state, dataset, config, &PyramidL1::default())
}

pub fn train_step_with(
    state: &mut TrainState,
    dataset: &SceneDataset,
    config: &TrainConfig,
    perceptual: &dyn PerceptualLoss,
) -> Result<StepStats> {
    let step_seed = state.rng.next_u64();
    let batch = sample_ray_batch(dataset, config.batch_rays, &mut state.rng)?;
    let spec = training_spec(dataset, config, step_seed);
    let (mut loss, psnr, mut grad) = l1_loss_and_grad(state, &batch, &spec, config)?;
    if config.perceptual_weight > 0.0 {
        let (p_loss, p_grad) = perceptual_patch(state, dataset, config, perceptual, step_seed)?;
        loss += config.perceptual_weight * p_loss;
        grad.iter_mut().zip(p_grad).for_each(|(g, p)| *g += p);
    }
    apply_step(state, loss, psnr, grad, config)
}

/// One L1-only step on a caller-supplied batch and sampling spec.
pub fn train_step_on_batch(
    state: &mut TrainState,
    batch: &RayBatch,
    spec: &RaySampleSpec,
    config: &TrainConfig,
) -> Result<StepStats> {
    let (loss, psnr, grad) = l1_loss_and_grad(state, batch, spec, config)?;
    apply_step(state, loss, psnr, grad, config)
}

fn l1_loss_and_grad(
    state: &TrainState,
    batch: &RayBatch,
    spec: &RaySampleSpec,
    config: &TrainConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    if batch.rays.len() != batch.targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rays, {} targets",
            batch.rays.len(),
            batch.targets.len()
        )));
    }
    let scale = config.l1_weight / (3 * batch.rays.len()) as f64;
    let targets = &batch.targets;
    let (out, grad) = render_rays_with_cotangent(&state.params, &batch.rays, spec, |i, c| {
        std::array::from_fn(|k| scale * sign(c[k] - targets[i][k]))
    })?;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (c, t) in out.colors.iter().zip(targets) {
        for k in 0..3 {
            let d = c[k] - t[k];
            abs_sum += d.abs();
            sq_sum += d * d;
        }
    }
    let count = (3 * batch.rays.len()) as f64;
    let psnr = -10.0 * (sq_sum / count).max(1e-12).log10();
    Ok((config.l1_weight * abs_sum / count, psnr, grad))
}

pub(crate) fn apply_step(
    state: &mut TrainState,
    loss: f64,
    psnr: f64,
    mut grad: Vec<f64>,
    config: &TrainConfig,
) -> Result<StepStats> {
    if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteLoss(state.iteration));
    }
    clip_global_norm(&mut grad, config.grad_clip);
    state.adam.update(
        &mut state.params.values,
        &grad,
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
    );
    state.iteration += 1;
    Ok(StepStats {
        iteration: state.iteration,
        loss,
        psnr,
    })
}

/// Renders a random patch of a random view and returns the weighted
/// perceptual loss gradient with respect to the parameters.
fn perceptual_patch(
    state: &mut TrainState,
    dataset: &SceneDataset,
    config: &TrainConfig,
    perceptual: &dyn PerceptualLoss,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let view = &dataset.views()[state.rng.random_range(0..dataset.len())];
    let (w, h) = (view.current().width(), view.current().height());
    let (pw, ph) = (config.patch_size.min(w), config.patch_size.min(h));
    let x0 = state.rng.random_range(0..=w - pw);
    let y0 = state.rng.random_range(0..=h - ph);
    let pixels: Vec<(u32, u32)> = (y0..y0 + ph)
        .flat_map(|y| (x0..x0 + pw).map(move |x| (x, y)))
        .collect();
    let rays = crate::renderer::generate_rays(view.camera(), &pixels)?;
    let spec = training_spec(dataset, config, seed ^ 0x9e37_79b9_7f4a_7c15);
    let rendered = render_rays(&state.params, &rays, &spec)?;
    let rendered = Image::from_pixels(pw, ph, rendered.colors)?;
    let target = view.current().crop(x0, y0, pw, ph)?;
    let (loss, d_img) = perceptual.loss_and_grad(&rendered, &target)?;
    let d_colors: Vec<Rgb> = d_img
        .pixels()
        .iter()
        .map(|g| g.map(|v| v * config.perceptual_weight))
        .collect();
    let (_, grad) = render_rays_vjp(&state.params, &rays, &spec, &d_colors)?;
    Ok((loss, grad))
}

/// Runs `steps` optimization steps, reporting each through `on_step`.
pub fn train(
    state: &mut TrainState,
    dataset: &SceneDataset,
    config: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(&StepStats),
) -> Result<Option<StepStats>> {
    config.validate()?;
    let mut last = None;
    for _ in 0..steps {
        let stats = train_step(state, dataset, config)?;
        on_step(&stats);
        last = Some(stats);
    }
    Ok(last)
}
