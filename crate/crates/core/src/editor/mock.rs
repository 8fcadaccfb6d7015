//! Closed-form mock editors.
//!
//! For guidance strength `e = clamp((s_T - 1) / 9, 0, 1) * f` with
//! `f = clamp(2 - s_I, 0, 1)` when `s_I >= 1` and `f = 1` otherwise:
//!
//! ```text
//! target = lerp(c, F(c), e)
//! out    = clamp01((1 - t) * current + t * target + b_v + rho_call * t * xi)
//! ```
//!
//! Random streams are SplitMix64 with `u = (next >> 11) * 2^-53`, so other
//! implementations can reproduce them exactly:
//!
//! * `b_v`: three draws `rho_view * (2u - 1)` from the stream seeded with
//!   `seed ^ ((2 * view + 1) * 0x9E3779B97F4A7C15)` (wrapping).
//! * `xi`: per pixel, row-major, three draws `2u - 1` from the stream seeded
//!   with `seed ^ ((2 * call + 2) * 0x9E3779B97F4A7C15)`, where `call` counts
//!   previous `edit` calls on this editor.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::{check_output, EditRequest, Editor, EditorParams, NoiseQuery, NoiseSchedule};
use crate::color::ColorTransform;
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Uniform in `[0, 1)` with 53 bits.
pub fn portable_uniform(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn stream(seed: u64, key: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed ^ key.wrapping_mul(GOLDEN))
}

/// Returns the conditioning image unchanged.
#[derive(Clone, Debug, Default)]
pub struct IdentityEditor {
    schedule: NoiseSchedule,
}

impl IdentityEditor {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Editor for IdentityEditor {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Image> {
        request.validate()?;
        Ok(request.conditioning.clone())
    }

    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<Image> {
        invert(&self.schedule, query, query.conditioning, [0.0; 3])
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Where the mock's edit target comes from.
#[derive(Clone, Debug)]
pub enum TargetSource {
    /// `F` applied to the conditioning image (grounded).
    Conditioning,
    /// `F` applied to the image being edited, so edits compound.
    Current,
    /// A fixed image that ignores the conditioning.
    Fixed(Arc<Image>),
}

#[derive(Clone, Debug)]
pub struct MockEditor {
    transform: ColorTransform,
    rho_view: f64,
    rho_call: f64,
    source: TargetSource,
    schedule: NoiseSchedule,
    calls: u64,
}

impl MockEditor {
    pub fn new(transform: ColorTransform, rho_view: f64, rho_call: f64) -> Self {
        Self {
            transform,
            rho_view,
            rho_call,
            source: TargetSource::Conditioning,
            schedule: NoiseSchedule::default(),
            calls: 0,
        }
    }

    /// View-consistent edits.
    pub fn consistent(transform: ColorTransform) -> Self {
        Self::new(transform, 0.0, 0.0)
    }

    /// Edits carrying a fixed per-view color bias of magnitude `rho_view`.
    pub fn inconsistent(transform: ColorTransform, rho_view: f64) -> Self {
        Self::new(transform, rho_view, 0.0)
    }

    /// Edits toward a fixed image regardless of the conditioning.
    pub fn unconditioned(target: Image, rho_view: f64, rho_call: f64) -> Self {
        Self::new(ColorTransform::Identity, rho_view, rho_call)
            .with_source(TargetSource::Fixed(Arc::new(target)))
    }

    pub fn with_source(mut self, source: TargetSource) -> Self {
        self.source = source;
        self
    }

    pub fn transform(&self) -> &ColorTransform {
        &self.transform
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// Blend weight between `c` and `F(c)` for the given guidance scales.
    pub fn strength(params: &EditorParams) -> f64 {
        let e_t = ((params.guidance_text - 1.0) / 9.0).clamp(0.0, 1.0);
        let f_i = if params.guidance_image >= 1.0 {
            (2.0 - params.guidance_image).clamp(0.0, 1.0)
        } else {
            1.0
        };
        e_t * f_i
    }

    pub fn view_bias(&self, seed: u64, view_id: usize) -> Rgb {
        let mut rng = stream(seed, 2 * view_id as u64 + 1);
        std::array::from_fn(|_| self.rho_view * (2.0 * portable_uniform(&mut rng) - 1.0))
    }

    /// The edit target before noise level blending and biases.
    pub fn target(
        &self,
        conditioning: &Image,
        current: &Image,
        params: &EditorParams,
    ) -> Result<Image> {
        let lerp_to_transform = |base: &Image| {
            let s = Self::strength(params);
            base.map(|p| {
                let f = self.transform.apply(p);
                std::array::from_fn(|c| p[c] + s * (f[c] - p[c]))
            })
        };
        match &self.source {
            TargetSource::Conditioning => Ok(lerp_to_transform(conditioning)),
            TargetSource::Current => Ok(lerp_to_transform(current)),
            TargetSource::Fixed(img) => {
                img.ensure_same_dims(conditioning)?;
                Ok((**img).clone())
            }
        }
    }
}

impl Editor for MockEditor {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Image> {
        request.validate()?;
        let target = self.target(request.conditioning, request.current, request.params)?;
        let bias = self.view_bias(request.params.seed, request.view_id);
        let mut noise = stream(request.params.seed, 2 * self.calls + 2);
        self.calls += 1;
        let t = request.t;
        let amp = self.rho_call * t;
        let pixels = request
            .current
            .pixels()
            .iter()
            .zip(target.pixels())
            .map(|(cur, tgt)| {
                std::array::from_fn(|c| {
                    let xi = 2.0 * portable_uniform(&mut noise) - 1.0;
                    ((1.0 - t) * cur[c] + t * tgt[c] + bias[c] + amp * xi).clamp(0.0, 1.0)
                })
            })
            .collect();
        check_output(Image::from_pixels(
            request.current.width(),
            request.current.height(),
            pixels,
        )?)
    }

    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<Image> {
        // The drift-amplifying variant has no current image here; its target
        // is taken from the conditioning.
        let target = self.target(query.conditioning, query.conditioning, query.params)?;
        let bias = self.view_bias(query.params.seed, query.view_id);
        invert(&self.schedule, query, &target, bias)
    }

    fn describe(&self) -> String {
        let kind = match self.source {
            TargetSource::Conditioning => "mock",
            TargetSource::Current => "mock-drift",
            TargetSource::Fixed(_) => "mock-uncond",
        };
        format!(
            "{kind}({:?}, rho_view={}, rho_call={})",
            self.transform, self.rho_view, self.rho_call
        )
    }
}

/// `eps = (z_t - sqrt(abar) * (target + bias)) / sqrt(1 - abar)`.
fn invert(
    schedule: &NoiseSchedule,
    query: &NoiseQuery<'_>,
    target: &Image,
    bias: Rgb,
) -> Result<Image> {
    if !(query.t >= schedule.min_level() && query.t <= 1.0) {
        return Err(Error::NoiseLevelTooSmall(query.t));
    }
    query.z_t.ensure_same_dims(target)?;
    let ab = schedule.alpha_bar(query.t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let pixels = query
        .z_t
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(z, x)| std::array::from_fn(|c| (z[c] - a * (x[c] + bias[c])) / s))
        .collect();
    check_output(Image::from_pixels(target.width(), target.height(), pixels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::rotate_hue;
    use crate::editor::noise_image_with;
    use crate::image::high_frequency_energy;
    use proptest::{prop_assert, proptest};

    fn scene_image(seed: u64) -> Image {
        let mut rng = SplitMix64::seed_from_u64(seed);
        Image::from_fn(16, 12, |_, _| {
            std::array::from_fn(|_| portable_uniform(&mut rng))
        })
    }

    fn full_strength() -> EditorParams {
        EditorParams {
            t_min: 0.0,
            t_max: 1.0,
            guidance_image: 1.0,
            guidance_text: 10.0,
            ..EditorParams::default()
        }
    }

    fn request<'a>(
        c: &'a Image,
        cur: &'a Image,
        t: f64,
        p: &'a EditorParams,
        v: usize,
    ) -> EditRequest<'a> {
        EditRequest {
            conditioning: c,
            current: cur,
            instruction: "make it green",
            t,
            params: p,
            view_id: v,
        }
    }

    #[test]
    fn identity_returns_conditioning() {
        let (c, cur) = (scene_image(1), scene_image(2));
        let p = EditorParams::default();
        let out = IdentityEditor::new()
            .edit(&request(&c, &cur, 0.5, &p, 0))
            .unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn full_strength_hue_edit_is_the_rotated_conditioning() {
        let (c, cur) = (scene_image(3), scene_image(4));
        let p = full_strength();
        let mut ed = MockEditor::consistent(ColorTransform::Hue { degrees: 120.0 });
        let out = ed.edit(&request(&c, &cur, 1.0, &p, 5)).unwrap();
        for (o, i) in out.pixels().iter().zip(c.pixels()) {
            let r = rotate_hue(*i, 120.0);
            for k in 0..3 {
                assert!((o[k] - r[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn low_noise_level_adheres_to_current() {
        let (c, cur) = (scene_image(3), scene_image(4));
        let p = full_strength();
        let mut ed = MockEditor::consistent(ColorTransform::Hue { degrees: 120.0 });
        let out = ed.edit(&request(&c, &cur, 0.02, &p, 0)).unwrap();
        assert!(out.mean_abs_diff(&cur).unwrap() < 0.02);
    }

    #[test]
    fn view_bias_separates_views() {
        let c = Image::filled(8, 8, [0.5; 3]);
        let p = full_strength();
        let mut ed = MockEditor::inconsistent(ColorTransform::Identity, 0.1);
        let a = ed.edit(&request(&c, &c, 1.0, &p, 0)).unwrap();
        let b = ed.edit(&request(&c, &c, 1.0, &p, 1)).unwrap();
        let (ba, bb) = (ed.view_bias(p.seed, 0), ed.view_bias(p.seed, 1));
        for k in 0..3 {
            assert!(ba[k].abs() <= 0.1 && bb[k].abs() <= 0.1);
            let diff = a.mean_color()[k] - b.mean_color()[k];
            assert!((diff - (ba[k] - bb[k])).abs() < 1e-12);
        }
        assert_ne!(ba, bb);
    }

    #[test]
    fn edits_are_grounded_on_the_request_only() {
        let (c, cur) = (scene_image(5), scene_image(6));
        let p = full_strength();
        let mut a = MockEditor::new(ColorTransform::Hue { degrees: 40.0 }, 0.1, 0.05);
        let mut b = a.clone();
        // Unrelated edits in between do not change a later identical request
        // once the call counters agree.
        let other = scene_image(7);
        a.edit(&request(&other, &other, 0.7, &p, 3)).unwrap();
        b.edit(&request(&c, &cur, 0.2, &p, 1)).unwrap();
        let x = a.edit(&request(&c, &cur, 0.6, &p, 2)).unwrap();
        let y = b.edit(&request(&c, &cur, 0.6, &p, 2)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn call_noise_is_fresh_per_call() {
        let c = Image::filled(4, 4, [0.5; 3]);
        let p = full_strength();
        let mut ed = MockEditor::new(ColorTransform::Identity, 0.0, 0.1);
        let a = ed.edit(&request(&c, &c, 0.5, &p, 0)).unwrap();
        let b = ed.edit(&request(&c, &c, 0.5, &p, 0)).unwrap();
        assert_ne!(a, b);
        for px in a.pixels() {
            for v in px {
                assert!((v - 0.5).abs() <= 0.05 + 1e-12);
            }
        }
    }

    #[test]
    fn predicted_noise_inverts_the_forward_process() {
        let c = scene_image(8);
        let p = full_strength();
        let mut ed = MockEditor::inconsistent(ColorTransform::Hue { degrees: 120.0 }, 0.1);
        let schedule = NoiseSchedule::default();
        let bias = ed.view_bias(p.seed, 4);
        let target = ed.target(&c, &c, &p).unwrap();
        let biased = target.map(|x| std::array::from_fn(|k| x[k] + bias[k]));
        for t in [0.01, 0.3, 0.77, 1.0] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let (z, eps) = noise_image_with(&biased, t, &mut rng, &schedule).unwrap();
            let q = NoiseQuery {
                z_t: &z,
                t,
                conditioning: &c,
                instruction: "x",
                params: &p,
                view_id: 4,
            };
            let eps_hat = ed.predict_noise(&q).unwrap();
            let ab = schedule.alpha_bar(t);
            for ((e, eh), (zz, tg)) in eps
                .pixels()
                .iter()
                .zip(eps_hat.pixels())
                .zip(z.pixels().iter().zip(biased.pixels()))
            {
                for k in 0..3 {
                    assert!((e[k] - eh[k]).abs() < 1e-6);
                    let x0 = (zz[k] - (1.0 - ab).sqrt() * eh[k]) / ab.sqrt();
                    assert!((x0 - tg[k]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn tiny_noise_levels_are_rejected() {
        let c = scene_image(8);
        let p = full_strength();
        let q = NoiseQuery {
            z_t: &c,
            t: 0.0005,
            conditioning: &c,
            instruction: "x",
            params: &p,
            view_id: 0,
        };
        let mut ed = MockEditor::consistent(ColorTransform::Identity);
        assert!(matches!(
            ed.predict_noise(&q),
            Err(Error::NoiseLevelTooSmall(_))
        ));
    }

    #[test]
    fn strength_formula() {
        let p = |s_i, s_t| EditorParams {
            guidance_image: s_i,
            guidance_text: s_t,
            ..EditorParams::default()
        };
        assert_eq!(MockEditor::strength(&p(1.0, 10.0)), 1.0);
        assert_eq!(MockEditor::strength(&p(2.0, 10.0)), 0.0);
        assert!((MockEditor::strength(&p(1.5, 7.5)) - 0.5 * 6.5 / 9.0).abs() < 1e-15);
        assert_eq!(MockEditor::strength(&p(0.5, 1.0)), 0.0);
        assert_eq!(MockEditor::strength(&p(0.5, 20.0)), 1.0);
    }

    #[test]
    fn drift_variant_compounds() {
        let c = scene_image(10);
        let p = full_strength();
        let darken = ColorTransform::Affine {
            matrix: [0.8, 0.0, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.8, 0.0],
        };
        let mut ed = MockEditor::consistent(darken).with_source(TargetSource::Current);
        let mut cur = c.clone();
        let mut prev = 0.0;
        for _ in 0..5 {
            cur = ed.edit(&request(&c, &cur, 1.0, &p, 0)).unwrap();
            let d = cur.mean_abs_diff(&c).unwrap();
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn mock_edits_do_not_add_high_frequency_energy_at_zero_noise() {
        let c = scene_image(11);
        let p = full_strength();
        let mut ed = MockEditor::consistent(ColorTransform::Identity);
        let out = ed.edit(&request(&c, &c, 1.0, &p, 0)).unwrap();
        assert!((high_frequency_energy(&out) - high_frequency_energy(&c)).abs() < 1e-15);
    }

    #[test]
    fn portable_stream_reference_values() {
        // First outputs of SplitMix64 seeded with 0.
        let mut rng = SplitMix64::seed_from_u64(0);
        assert_eq!(rng.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(rng.next_u64(), 0x6e78_9e6a_a1b9_65f4);
        let mut rng = SplitMix64::seed_from_u64(0);
        assert_eq!(
            portable_uniform(&mut rng),
            (0xe220_a839_7b1d_cdafu64 >> 11) as f64 / 9007199254740992.0
        );
    }

    proptest! {
        #[test]
        fn distance_to_conditioning_is_monotone_in_guidance(
            s_t_a in 0.0f64..15.0, s_t_b in 0.0f64..15.0,
            s_i_a in 0.0f64..3.0, s_i_b in 0.0f64..3.0,
            t in 0.0f64..=1.0, seed in 0u64..1000,
        ) {
            let c = scene_image(seed);
            let mut ed = MockEditor::consistent(ColorTransform::Hue { degrees: 90.0 });
            let dist = |ed: &mut MockEditor, s_i: f64, s_t: f64| {
                let p = EditorParams { t_min: 0.0, t_max: 1.0, guidance_image: s_i, guidance_text: s_t, ..EditorParams::default() };
                let out = ed.edit(&request(&c, &c, t, &p, 0)).unwrap();
                out.pixels().iter().zip(c.pixels()).map(|(o, i)| {
                    (0..3).map(|k| (o[k] - i[k]).powi(2)).sum::<f64>().sqrt()
                }).collect::<Vec<_>>()
            };
            let (lo_t, hi_t) = (s_t_a.min(s_t_b), s_t_a.max(s_t_b));
            let a = dist(&mut ed, s_i_a, lo_t);
            let b = dist(&mut ed, s_i_a, hi_t);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x <= *y + 1e-12);
            }
            let (lo_i, hi_i) = (s_i_a.min(s_i_b), s_i_a.max(s_i_b));
            let a = dist(&mut ed, lo_i, s_t_a);
            let b = dist(&mut ed, hi_i, s_t_a);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x + 1e-12 >= *y);
            }
        }
    }

    #[test]
    fn uncond_target_ignores_conditioning() {
        let fixed = scene_image(12);
        let p = full_strength();
        let mut ed = MockEditor::unconditioned(fixed.clone(), 0.0, 0.0);
        let a = ed
            .edit(&request(&scene_image(13), &scene_image(14), 1.0, &p, 0))
            .unwrap();
        let b = ed
            .edit(&request(&scene_image(15), &scene_image(16), 1.0, &p, 0))
            .unwrap();
        assert_eq!(a, fixed);
        assert_eq!(b, fixed);
    }
}
