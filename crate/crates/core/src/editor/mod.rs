//! Image editors: the operator that maps a rendered view, its original
//! capture and a text instruction to an edited image.
//!
//! Engine-side editors work directly in RGB. The [`MockEditor`] family has a
//! closed form, [`LossyCodecWrapper`] imitates an autoencoder round trip and
//! [`RemoteEditor`] talks to an external diffusion service.

mod codec;
mod mock;
pub(crate) mod remote;
mod selection;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use codec::LossyCodecWrapper;
pub use mock::{portable_uniform, IdentityEditor, MockEditor, TargetSource};
pub use remote::{HealthInfo, RemoteEditor};
pub use selection::parse_editor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorParams {
    pub t_min: f64,
    pub t_max: f64,
    pub ddim_steps: u32,
    /// Image guidance scale `s_I`.
    pub guidance_image: f64,
    /// Text guidance scale `s_T`.
    pub guidance_text: f64,
    pub seed: u64,
}

impl Default for EditorParams {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
            ddim_steps: 20,
            guidance_image: 1.5,
            guidance_text: 7.5,
            seed: 0,
        }
    }
}

impl EditorParams {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.t_min
            && self.t_min <= self.t_max
            && self.t_max <= 1.0
            && self.ddim_steps >= 1
            && self.guidance_image >= 0.0
            && self.guidance_text >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("editor params {self:?}")))
        }
    }
}

/// One edit of view `view_id`.
#[derive(Clone, Copy, Debug)]
pub struct EditRequest<'a> {
    /// The never-edited capture of this view.
    pub conditioning: &'a Image,
    /// The image being edited, usually a render of the current scene.
    pub current: &'a Image,
    pub instruction: &'a str,
    pub t: f64,
    pub params: &'a EditorParams,
    pub view_id: usize,
}

impl EditRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.conditioning.ensure_same_dims(self.current)?;
        if !(self.params.t_min..=self.params.t_max).contains(&self.t) {
            return Err(Error::InvalidConfig(format!(
                "t = {} outside [{}, {}]",
                self.t, self.params.t_min, self.params.t_max
            )));
        }
        Ok(())
    }
}

/// Inputs of a noise prediction for view `view_id`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseQuery<'a> {
    pub z_t: &'a Image,
    pub t: f64,
    pub conditioning: &'a Image,
    pub instruction: &'a str,
    pub params: &'a EditorParams,
    pub view_id: usize,
}

pub trait Editor: Send {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Image>;

    /// Estimate of the noise present in `query.z_t`.
    fn predict_noise(&mut self, _query: &NoiseQuery<'_>) -> Result<Image> {
        Err(Error::UnsupportedByEditor(self.describe()))
    }

    fn describe(&self) -> String;
}

impl<E: Editor + ?Sized> Editor for Box<E> {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Image> {
        (**self).edit(request)
    }

    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<Image> {
        (**self).predict_noise(query)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Discrete linear-beta diffusion schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 8.5e-4, 1.2e-2)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2, "schedule needs at least two steps");
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Step index for a noise level: `floor(t * T)`, with `t = 1` mapped to
    /// the last step.
    pub fn index(&self, t: f64) -> usize {
        ((t.clamp(0.0, 1.0) * self.steps() as f64).floor() as usize).min(self.steps() - 1)
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        self.alpha_bars[self.index(t)]
    }

    /// Smallest noise level accepted by noise prediction.
    pub fn min_level(&self) -> f64 {
        1.0 / self.steps() as f64
    }
}

/// Uniform draw from `[t_min, t_max]`.
pub fn draw_noise_level<R: Rng + ?Sized>(rng: &mut R, params: &EditorParams) -> Result<f64> {
    params.validate()?;
    let u: f64 = rng.random();
    Ok(params.t_min + (params.t_max - params.t_min) * u)
}

/// `z_t = sqrt(abar) * image + sqrt(1 - abar) * eps` with per-channel
/// standard normal `eps`.
pub fn noise_image(
    image: &Image,
    t: f64,
    rng: &mut ChaCha8Rng,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    Ok(noise_image_with(image, t, rng, schedule)?.0)
}

/// Like [`noise_image`], also returning the drawn noise.
pub fn noise_image_with(
    image: &Image,
    t: f64,
    rng: &mut ChaCha8Rng,
    schedule: &NoiseSchedule,
) -> Result<(Image, Image)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!(
            "noise level {t} outside [0, 1]"
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = Image::from_fn(image.width(), image.height(), |_, _| {
        std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal))
    });
    let pixels = image
        .pixels()
        .iter()
        .zip(eps.pixels())
        .map(|(p, e)| std::array::from_fn(|c| a * p[c] + s * e[c]))
        .collect();
    Ok((
        Image::from_pixels(image.width(), image.height(), pixels)?,
        eps,
    ))
}

pub(crate) fn check_output(img: Image) -> Result<Image> {
    if img.is_finite() {
        Ok(img)
    } else {
        Err(Error::NonFiniteOutput)
    }
}
