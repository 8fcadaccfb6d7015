//! Float RGB images in `[0, 1]`, PNG I/O, and the small set of resampling
//! operators the engine needs (bilinear resize, Gaussian pyramid levels).
//!
//! PNG encoding quantizes with round-half-up (`floor(255 x + 0.5)`), and
//! decoding maps `q -> q / 255`, so decode/encode round-trips are exact.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; (width * height) as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<Rgb> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: Rgb) {
        let w = self.width;
        self.pixels[(y * w + x) as usize] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().flatten().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(Rgb) -> Rgb) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|p| p.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Mean squared error over all pixels and channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.ensure_same_dims(other)?;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum();
        Ok(sum / (3 * self.pixels.len()) as f64)
    }

    /// Mean absolute per-channel difference.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.ensure_same_dims(other)?;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>())
            .sum();
        Ok(sum / (3 * self.pixels.len()) as f64)
    }

    /// Per-channel mean over the image.
    pub fn mean_color(&self) -> Rgb {
        let n = self.pixels.len().max(1) as f64;
        let mut acc = [0.0; 3];
        for p in &self.pixels {
            for c in 0..3 {
                acc[c] += p[c];
            }
        }
        acc.map(|v| v / n)
    }

    /// Copies the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Bilinear resampling at pixel centers with clamp-to-edge borders.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(width, height, |x, y| {
            self.sample_bilinear((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
        })
    }

    /// Samples at continuous pixel coordinates (pixel centers at integers).
    pub fn sample_bilinear(&self, fx: f64, fy: f64) -> Rgb {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let fx = fx.clamp(0.0, max_x);
        let fy = fy.clamp(0.0, max_y);
        let x0 = fx.floor() as u32;
        let y0 = fy.floor() as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let (p00, p10, p01, p11) = (
            self.get(x0, y0),
            self.get(x1, y0),
            self.get(x0, y1),
            self.get(x1, y1),
        );
        std::array::from_fn(|c| {
            let top = p00[c] * (1.0 - ax) + p10[c] * ax;
            let bottom = p01[c] * (1.0 - ax) + p11[c] * ax;
            top * (1.0 - ay) + bottom * ay
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(quantize_u8))
            .collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != (width * height * 3) as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]].map(|v| v as f64 / 255.0))
            .collect();
        Image::from_pixels(width, height, pixels)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width, self.height);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(png_err)?;
            writer.write_image_data(&self.to_rgb8()).map_err(png_err)?;
        }
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let data = &buf[..info.buffer_size()];
        let (w, h) = (info.width, info.height);
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => data.to_vec(),
            png::ColorType::Rgba => data
                .chunks_exact(4)
                .flat_map(|c| [c[0], c[1], c[2]])
                .collect(),
            png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => data
                .chunks_exact(2)
                .flat_map(|c| [c[0], c[0], c[0]])
                .collect(),
            other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
        };
        Image::from_rgb8(w, h, &rgb)
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Image::from_png_bytes(&bytes)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Png(e.to_string())
}

/// Round-half-up 8-bit quantization of a `[0, 1]` value.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a single-channel 16-bit grayscale PNG; `values` are scaled by
/// `1 / scale` and clamped to `[0, 1]` before quantization.
pub fn write_gray16_png(
    path: &Path,
    width: u32,
    height: u32,
    values: &[f64],
    scale: f64,
) -> Result<()> {
    if values.len() != (width * height) as usize {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {width}x{height}",
            values.len()
        )));
    }
    let data: Vec<u8> = values
        .iter()
        .flat_map(|v| {
            let q = ((v / scale).clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16;
            q.to_be_bytes()
        })
        .collect();
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width, height);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    Ok(())
}

/// Separable binomial kernel for pyramid construction.
const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn reduce_len(n: usize) -> usize {
    n.div_ceil(2)
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// One Gaussian pyramid step: binomial blur followed by 2x decimation.
/// Borders clamp to the edge. Output is `ceil(w/2) x ceil(h/2)`.
pub fn pyramid_reduce(img: &Image) -> Image {
    let (w, h) = img.dims();
    let (ow, oh) = (reduce_len(w), reduce_len(h));
    // Horizontal pass: w x h -> ow x h.
    let mut tmp = vec![[0.0; 3]; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = [0.0; 3];
            for (k, wk) in BINOMIAL5.iter().enumerate() {
                let sx = clamp_index(2 * ox as isize + k as isize - 2, w);
                let p = img.pixels[y * w + sx];
                for c in 0..3 {
                    acc[c] += wk * p[c];
                }
            }
            tmp[y * ow + ox] = acc;
        }
    }
    let mut out = vec![[0.0; 3]; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0.0; 3];
            for (k, wk) in BINOMIAL5.iter().enumerate() {
                let sy = clamp_index(2 * oy as isize + k as isize - 2, h);
                let p = tmp[sy * ow + ox];
                for c in 0..3 {
                    acc[c] += wk * p[c];
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    Image {
        width: ow as u32,
        height: oh as u32,
        pixels: out,
    }
}

/// Exact adjoint of [`pyramid_reduce`]: maps a gradient on the reduced
/// level back onto a `width x height` image.
pub fn pyramid_reduce_adjoint(grad: &Image, width: u32, height: u32) -> Image {
    let (w, h) = (width as usize, height as usize);
    let (ow, oh) = grad.dims();
    debug_assert_eq!((ow, oh), (reduce_len(w), reduce_len(h)));
    let mut tmp = vec![[0.0; 3]; ow * h];
    for oy in 0..oh {
        for ox in 0..ow {
            let g = grad.pixels[oy * ow + ox];
            for (k, wk) in BINOMIAL5.iter().enumerate() {
                let sy = clamp_index(2 * oy as isize + k as isize - 2, h);
                let t = &mut tmp[sy * ow + ox];
                for c in 0..3 {
                    t[c] += wk * g[c];
                }
            }
        }
    }
    let mut out = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for ox in 0..ow {
            let g = tmp[y * ow + ox];
            for (k, wk) in BINOMIAL5.iter().enumerate() {
                let sx = clamp_index(2 * ox as isize + k as isize - 2, w);
                let t = &mut out[y * w + sx];
                for c in 0..3 {
                    t[c] += wk * g[c];
                }
            }
        }
    }
    Image {
        width,
        height,
        pixels: out,
    }
}

/// Upsamples a reduced level back to `width x height`: zero-insertion plus
/// binomial blur, normalized per pixel so constants are reproduced exactly
/// at the borders too.
pub fn pyramid_expand(reduced: &Image, width: u32, height: u32) -> Image {
    let num = pyramid_reduce_adjoint(reduced, width, height);
    let ones = Image::filled(reduced.width, reduced.height, [1.0; 3]);
    let den = pyramid_reduce_adjoint(&ones, width, height);
    let pixels = num
        .pixels
        .iter()
        .zip(&den.pixels)
        .map(|(n, d)| std::array::from_fn(|c| n[c] / d[c]))
        .collect();
    Image {
        width,
        height,
        pixels,
    }
}

/// Mean squared value of the finest Laplacian pyramid level,
/// `img - expand(reduce(img))`. Drops as an image gets blurrier.
pub fn high_frequency_energy(img: &Image) -> f64 {
    let low = pyramid_expand(&pyramid_reduce(img), img.width, img.height);
    let sum: f64 = img
        .pixels
        .iter()
        .zip(low.pixels())
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    sum / (3 * img.pixels.len()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: u32, h: u32) -> Image {
        Image::from_fn(w, h, |x, y| {
            let v = ((x + y) % 2) as f64;
            [v, 1.0 - v, 0.25 + 0.5 * v]
        })
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let img = Image::from_fn(7, 5, |x, y| {
            [
                x as f64 / 6.0,
                y as f64 / 4.0,
                ((x * y) % 256) as f64 / 255.0,
            ]
        });
        let q = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        let again = Image::from_png_bytes(&q.to_png_bytes().unwrap()).unwrap();
        assert_eq!(q, again);
        assert_eq!(q.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_u8(0.5 / 255.0), 1);
        assert_eq!(quantize_u8(0.49 / 255.0), 0);
        assert_eq!(quantize_u8(1.2), 255);
        assert_eq!(quantize_u8(-0.1), 0);
    }

    #[test]
    fn reduce_adjoint_satisfies_inner_product_identity() {
        let x = Image::from_fn(9, 6, |a, b| {
            let s = (a * 7 + b * 13) as f64;
            [s.sin(), s.cos(), (0.3 * s).sin()]
        });
        let y = Image::from_fn(5, 3, |a, b| {
            let s = (a * 3 + b * 11) as f64;
            [s.cos(), (0.7 * s).sin(), 0.1 * s]
        });
        let dot = |a: &Image, b: &Image| -> f64 {
            a.pixels()
                .iter()
                .zip(b.pixels())
                .map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2])
                .sum()
        };
        let lhs = dot(&pyramid_reduce(&x), &y);
        let rhs = dot(&x, &pyramid_reduce_adjoint(&y, 9, 6));
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn constant_image_has_no_high_frequency_energy() {
        let img = Image::filled(16, 16, [0.3, 0.6, 0.9]);
        assert!(high_frequency_energy(&img) < 1e-20);
        assert!(high_frequency_energy(&checker(16, 16)) > 0.05);
    }

    #[test]
    fn bilinear_resize_preserves_constants_and_halves_exactly() {
        let img = Image::filled(10, 6, [0.2, 0.4, 0.6]);
        let r = img.resize_bilinear(3, 2);
        for p in r.pixels() {
            for c in 0..3 {
                assert!((p[c] - [0.2, 0.4, 0.6][c]).abs() < 1e-12);
            }
        }
        // 4 -> 2 samples exactly between source pixels.
        let ramp = Image::from_fn(4, 1, |x, _| [x as f64, 0.0, 0.0]);
        let half = ramp.resize_bilinear(2, 1);
        assert_eq!(half.get(0, 0)[0], 0.5);
        assert_eq!(half.get(1, 0)[0], 2.5);
    }
}
