use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use super::mock::portable_uniform;
use super::{check_output, EditRequest, Editor, NoiseQuery};
use crate::error::Result;
use crate::image::Image;

/// Wraps an editor with a lossy encode/decode round trip on both its input
/// and its output, imitating a latent autoencoder.
///
/// Each pass resamples the image with a random sub-pixel shift of up to half
/// a pixel, then downsamples by two and upsamples back.
#[derive(Clone, Debug)]
pub struct LossyCodecWrapper<E> {
    inner: E,
    calls: u64,
}

impl<E: Editor> LossyCodecWrapper<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: 0 }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    /// One lossy pass with the shift drawn from `seed`.
    pub fn round_trip(img: &Image, seed: u64) -> Image {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let dx = portable_uniform(&mut rng) - 0.5;
        let dy = portable_uniform(&mut rng) - 0.5;
        let (w, h) = (img.width(), img.height());
        let shifted = Image::from_fn(w, h, |x, y| {
            img.sample_bilinear(x as f64 + dx, y as f64 + dy)
        });
        shifted
            .resize_bilinear(w.div_ceil(2), h.div_ceil(2))
            .resize_bilinear(w, h)
    }
}

impl<E: Editor> Editor for LossyCodecWrapper<E> {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Image> {
        request.validate()?;
        let base = request.params.seed ^ self.calls.wrapping_mul(0xD1B5_4A32_D192_ED03);
        self.calls += 1;
        let encoded = Self::round_trip(request.current, base);
        let inner_request = EditRequest {
            current: &encoded,
            ..*request
        };
        let edited = self.inner.edit(&inner_request)?;
        check_output(Self::round_trip(&edited, base.rotate_left(32)).clamped())
    }

    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<Image> {
        self.inner.predict_noise(query)
    }

    fn describe(&self) -> String {
        format!("lossy({})", self.inner.describe())
    }
}
