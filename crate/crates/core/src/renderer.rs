//! Per-pixel ray generation and volume rendering by quadrature.
//!
//! Along a ray with sample distances `t_0 < … < t_{N-1}` and spacings
//! `δ_i = t_{i+1} - t_i` (the last one runs to `far`):
//!
//! ```text
//! T_i = exp(-Σ_{j<i} σ_j δ_j)      w_i = T_i (1 - exp(-σ_i δ_i))
//! C   = Σ w_i c_i + (1 - Σ w_i) · background
//! ```

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{sum_in_order, DensityColorField, RadianceFieldParams};
use crate::image::{Image, Rgb};
use crate::scene_io::CameraModel;

/// Rays per parallel work item.
const RAY_CHUNK: usize = 64;
const DEPTH_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub pixel: (u32, u32),
    pub view_id: Option<usize>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleSpec {
    pub n_samples: usize,
    /// Jitter each sample uniformly inside its bin (training only).
    pub stratified: bool,
    pub near: f64,
    pub far: f64,
    pub rng_seed: u64,
    pub background: Rgb,
}

impl RaySampleSpec {
    /// Deterministic midpoint sampling.
    pub fn evaluation(near: f64, far: f64, n_samples: usize, background: Rgb) -> Self {
        Self {
            n_samples,
            stratified: false,
            near,
            far,
            rng_seed: 0,
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::InvalidSpec(format!(
                "n_samples must be >= 2, got {}",
                self.n_samples
            )));
        }
        if !(self.near.is_finite() && self.far.is_finite() && self.near < self.far) {
            return Err(Error::InvalidSpec(format!(
                "need near < far, got {} / {}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// Sample distances for the ray at `ray_index`. Stratified jitter uses
    /// an independent stream per ray derived from `(rng_seed, ray_index)`.
    pub fn sample_distances(&self, ray_index: usize) -> Vec<f64> {
        let bin = (self.far - self.near) / self.n_samples as f64;
        if self.stratified {
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            rng.set_stream(ray_index as u64);
            (0..self.n_samples)
                .map(|i| self.near + (i as f64 + rng.random::<f64>()) * bin)
                .collect()
        } else {
            (0..self.n_samples)
                .map(|i| self.near + (i as f64 + 0.5) * bin)
                .collect()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderOutput {
    pub colors: Vec<Rgb>,
    pub accumulation: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: Rgb,
    pub accumulation: f64,
    pub depth: f64,
    pub weights: Vec<f64>,
}

fn deltas(ts: &[f64], far: f64) -> impl Iterator<Item = f64> + '_ {
    (0..ts.len()).map(move |i| ts.get(i + 1).copied().unwrap_or(far) - ts[i])
}

/// Composites samples along one ray.
pub fn composite(
    ts: &[f64],
    densities: &[f64],
    colors: &[Rgb],
    far: f64,
    background: Rgb,
) -> Composite {
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut accumulation = 0.0;
    let mut depth = 0.0;
    let mut weights = Vec::with_capacity(ts.len());
    for (i, delta) in deltas(ts, far).enumerate() {
        let optical = densities[i] * delta;
        let w = transmittance * -(-optical).exp_m1();
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        accumulation += w;
        depth += w * ts[i];
        weights.push(w);
        transmittance *= (-optical).exp();
    }
    // Σ w_i = 1 - T_N exactly; use the transmittance so accumulation <= 1.
    let remaining = transmittance;
    for c in 0..3 {
        color[c] += remaining * background[c];
    }
    Composite {
        color,
        accumulation,
        depth: depth / accumulation.max(DEPTH_EPS),
        weights,
    }
}

/// Gradient of the composited color with respect to per-sample densities
/// and colors, given the color cotangent `d_color`.
pub fn composite_vjp(
    ts: &[f64],
    densities: &[f64],
    colors: &[Rgb],
    far: f64,
    background: Rgb,
    d_color: Rgb,
) -> (Vec<f64>, Vec<Rgb>) {
    let n = ts.len();
    let dot = |a: &Rgb| a[0] * d_color[0] + a[1] * d_color[1] + a[2] * d_color[2];
    let deltas: Vec<f64> = deltas(ts, far).collect();
    // after[i] = T_{i+1}, the transmittance past sample i.
    let mut weights = Vec::with_capacity(n);
    let mut after = Vec::with_capacity(n);
    let mut transmittance = 1.0;
    for i in 0..n {
        let optical = densities[i] * deltas[i];
        weights.push(transmittance * -(-optical).exp_m1());
        transmittance *= (-optical).exp();
        after.push(transmittance);
    }
    let tail = transmittance * dot(&background);
    let mut d_density = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let s_k = dot(&colors[k]);
        d_density[k] = deltas[k] * (after[k] * s_k - suffix - tail);
        suffix += weights[k] * s_k;
    }
    let d_colors = weights.iter().map(|w| d_color.map(|g| w * g)).collect();
    (d_density, d_colors)
}

/// World-space ray through the center of pixel `(x, y)`.
pub fn pixel_ray(camera: &CameraModel, x: u32, y: u32) -> Result<Ray> {
    if x >= camera.width || y >= camera.height {
        return Err(Error::PixelOutOfBounds {
            x,
            y,
            width: camera.width,
            height: camera.height,
        });
    }
    let local = Vector3::new(
        (x as f64 + 0.5 - camera.cx) / camera.fl_x,
        -(y as f64 + 0.5 - camera.cy) / camera.fl_y,
        -1.0,
    );
    Ok(Ray {
        origin: camera.position(),
        direction: (camera.rotation() * local).normalize(),
        pixel: (x, y),
        view_id: None,
    })
}

/// World-space rays through the centers of the given pixels.
pub fn generate_rays(camera: &CameraModel, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(x, y)| pixel_ray(camera, x, y))
        .collect()
}

/// Rays for every pixel of the camera in row-major order.
pub fn camera_rays(camera: &CameraModel) -> Vec<Ray> {
    let pixels: Vec<(u32, u32)> = (0..camera.height)
        .flat_map(|y| (0..camera.width).map(move |x| (x, y)))
        .collect();
    generate_rays(camera, &pixels).expect("pixels are in bounds")
}

fn check_rays(rays: &[Ray]) -> Result<()> {
    for (i, r) in rays.iter().enumerate() {
        let norm = r.direction.norm();
        if !(norm - 1.0).abs().lt(&1e-6) || !r.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "ray {i} is not normalized or finite"
            )));
        }
    }
    Ok(())
}

/// Per-ray sample distances plus the flattened positions and directions.
type ChunkSamples = (Vec<Vec<f64>>, Vec<Vector3<f64>>, Vec<Vector3<f64>>);

fn chunk_samples(rays: &[Ray], first_index: usize, spec: &RaySampleSpec) -> ChunkSamples {
    let mut all_ts = Vec::with_capacity(rays.len());
    let mut positions = Vec::with_capacity(rays.len() * spec.n_samples);
    let mut dirs = Vec::with_capacity(rays.len() * spec.n_samples);
    for (j, ray) in rays.iter().enumerate() {
        let ts = spec.sample_distances(first_index + j);
        for &t in &ts {
            positions.push(ray.at(t));
            dirs.push(ray.direction);
        }
        all_ts.push(ts);
    }
    (all_ts, positions, dirs)
}

/// Volume-renders a batch of rays.
pub fn render_rays<F: DensityColorField + ?Sized>(
    field: &F,
    rays: &[Ray],
    spec: &RaySampleSpec,
) -> Result<RenderOutput> {
    spec.validate()?;
    check_rays(rays)?;
    let n = spec.n_samples;
    let chunks: Vec<Result<Vec<Composite>>> = rays
        .par_chunks(RAY_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let (all_ts, positions, dirs) = chunk_samples(chunk, c * RAY_CHUNK, spec);
            let out = field.query(&positions, &dirs)?;
            Ok(all_ts
                .iter()
                .enumerate()
                .map(|(j, ts)| {
                    let r = j * n..(j + 1) * n;
                    composite(
                        ts,
                        &out.densities[r.clone()],
                        &out.colors[r],
                        spec.far,
                        spec.background,
                    )
                })
                .collect())
        })
        .collect();
    let mut output = RenderOutput::default();
    for chunk in chunks {
        for comp in chunk? {
            output.colors.push(comp.color);
            output.accumulation.push(comp.accumulation);
            output.depth.push(comp.depth);
        }
    }
    Ok(output)
}

/// Renders rays and back-propagates fixed per-ray color cotangents to the
/// field parameters. Returns the forward output and
/// `∂⟨d_colors, C⟩/∂params`.
pub fn render_rays_vjp(
    params: &RadianceFieldParams,
    rays: &[Ray],
    spec: &RaySampleSpec,
    d_colors: &[Rgb],
) -> Result<(RenderOutput, Vec<f64>)> {
    if d_colors.len() != rays.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} color cotangents for {} rays",
            d_colors.len(),
            rays.len()
        )));
    }
    render_rays_with_cotangent(params, rays, spec, |i, _| d_colors[i])
}

/// Like [`render_rays_vjp`], but the cotangent of ray `i` is computed from
/// its rendered color by `cotangent(i, color)`. This lets per-ray losses
/// run forward and backward in a single pass.
pub fn render_rays_with_cotangent<G>(
    params: &RadianceFieldParams,
    rays: &[Ray],
    spec: &RaySampleSpec,
    cotangent: G,
) -> Result<(RenderOutput, Vec<f64>)>
where
    G: Fn(usize, &Rgb) -> Rgb + Sync,
{
    spec.validate()?;
    check_rays(rays)?;
    let n = spec.n_samples;
    let parts: Vec<(Vec<Composite>, Vec<f64>)> = rays
        .par_chunks(RAY_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let first = c * RAY_CHUNK;
            let (all_ts, positions, dirs) = chunk_samples(chunk, first, spec);
            let (out, tape) = params.forward_taped(&positions, &dirs);
            let mut d_dens = Vec::with_capacity(positions.len());
            let mut d_cols = Vec::with_capacity(positions.len());
            let mut comps = Vec::with_capacity(chunk.len());
            for (j, ts) in all_ts.iter().enumerate() {
                let r = j * n..(j + 1) * n;
                let (dens, cols) = (&out.densities[r.clone()], &out.colors[r]);
                let comp = composite(ts, dens, cols, spec.far, spec.background);
                let d_color = cotangent(first + j, &comp.color);
                let (dd, dc) = composite_vjp(ts, dens, cols, spec.far, spec.background, d_color);
                d_dens.extend(dd);
                d_cols.extend(dc);
                comps.push(comp);
            }
            let mut grad = vec![0.0; params.len()];
            params.backward(&tape, &d_dens, &d_cols, &mut grad);
            (comps, grad)
        })
        .collect();
    let mut output = RenderOutput::default();
    let mut grads = Vec::with_capacity(parts.len());
    for (comps, grad) in parts {
        for comp in comps {
            output.colors.push(comp.color);
            output.accumulation.push(comp.accumulation);
            output.depth.push(comp.depth);
        }
        grads.push(grad);
    }
    Ok((output, sum_in_order(grads, params.len())))
}

/// Renders a full frame at `1/downscale` resolution, returning the image and
/// per-pixel expected depth.
pub fn render_frame_with_depth<F: DensityColorField + ?Sized>(
    field: &F,
    camera: &CameraModel,
    downscale: u32,
    spec: &RaySampleSpec,
) -> Result<(Image, Vec<f64>)> {
    let camera = camera.downscaled(downscale)?;
    let rays = camera_rays(&camera);
    let out = render_rays(field, &rays, spec)?;
    let image = Image::from_pixels(camera.width, camera.height, out.colors)?;
    Ok((image, out.depth))
}

pub fn render_frame<F: DensityColorField + ?Sized>(
    field: &F,
    camera: &CameraModel,
    downscale: u32,
    spec: &RaySampleSpec,
) -> Result<Image> {
    Ok(render_frame_with_depth(field, camera, downscale, spec)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldOutput;
    use nalgebra::Matrix4;

    struct Constant {
        density: f64,
        color: Rgb,
    }

    impl DensityColorField for Constant {
        fn query(&self, p: &[Vector3<f64>], _: &[Vector3<f64>]) -> Result<FieldOutput> {
            Ok(FieldOutput {
                densities: vec![self.density; p.len()],
                colors: vec![self.color; p.len()],
            })
        }
    }

    fn camera(w: u32, h: u32) -> CameraModel {
        CameraModel {
            fl_x: 3.0,
            fl_y: 3.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            pose: Matrix4::identity(),
        }
    }

    #[test]
    fn homogeneous_slab_matches_closed_form() {
        let c = composite(&[0.0], &[1.0], &[[1.0, 0.0, 0.0]], 1.0, [1.0; 3]);
        let e = (-1.0f64).exp();
        assert!((c.color[0] - 1.0).abs() < 1e-12);
        assert!((c.color[1] - e).abs() < 1e-12);
        assert!((c.color[2] - e).abs() < 1e-12);
        assert!((c.accumulation - (1.0 - e)).abs() < 1e-12);
    }

    #[test]
    fn zero_density_shows_background() {
        let field = Constant {
            density: 0.0,
            color: [0.2, 0.3, 0.4],
        };
        let spec = RaySampleSpec::evaluation(0.5, 3.0, 8, [0.1, 0.7, 0.9]);
        let img = render_frame(&field, &camera(2, 2), 1, &spec).unwrap();
        for p in img.pixels() {
            assert_eq!(*p, [0.1, 0.7, 0.9]);
        }
        let out = render_rays(&field, &camera_rays(&camera(2, 2)), &spec).unwrap();
        assert!(out.accumulation.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn principal_point_ray_looks_down_minus_z() {
        let mut cam = camera(9, 5);
        cam.cx = 2.5;
        cam.cy = 2.5;
        // Pixel 5 has its center at cx + fl_x.
        let rays = generate_rays(&cam, &[(2, 2), (5, 2)]).unwrap();
        assert!((rays[0].direction - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        let expected = Vector3::new(1.0, 0.0, -1.0).normalize();
        assert!((rays[1].direction - expected).norm() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let err = generate_rays(&camera(4, 4), &[(4, 0)]).unwrap_err();
        assert!(matches!(err, Error::PixelOutOfBounds { x: 4, .. }));
    }

    #[test]
    fn downscale_contract() {
        let field = Constant {
            density: 0.0,
            color: [0.0; 3],
        };
        let spec = RaySampleSpec::evaluation(0.5, 3.0, 4, [1.0; 3]);
        let img = render_frame(&field, &camera(64, 64), 2, &spec).unwrap();
        assert_eq!(img.dims(), (32, 32));
        assert!(matches!(
            render_frame(&field, &camera(64, 64), 3, &spec),
            Err(Error::InvalidDownscale { .. })
        ));
    }

    #[test]
    fn spec_is_validated() {
        let mut spec = RaySampleSpec::evaluation(0.5, 3.0, 1, [1.0; 3]);
        assert!(spec.validate().is_err());
        spec.n_samples = 4;
        spec.far = 0.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn stratified_samples_stay_in_bins_and_are_reproducible() {
        let spec = RaySampleSpec {
            n_samples: 16,
            stratified: true,
            near: 1.0,
            far: 5.0,
            rng_seed: 11,
            background: [1.0; 3],
        };
        let a = spec.sample_distances(3);
        assert_eq!(a, spec.sample_distances(3));
        assert_ne!(a, spec.sample_distances(4));
        for (i, t) in a.iter().enumerate() {
            let lo = 1.0 + i as f64 * 0.25;
            assert!(*t >= lo && *t < lo + 0.25);
        }
    }

    #[test]
    fn composite_vjp_matches_finite_differences() {
        let ts = [0.5, 0.9, 1.6, 2.0];
        let dens = [0.3, 1.7, 0.2, 2.5];
        let cols = [
            [0.1, 0.5, 0.9],
            [0.8, 0.2, 0.4],
            [0.3, 0.3, 0.7],
            [0.6, 0.9, 0.1],
        ];
        let bg = [0.9, 0.8, 0.7];
        let dc = [0.7, -1.1, 0.4];
        let f = |d: &[f64], c: &[Rgb]| {
            let out = composite(&ts, d, c, 2.4, bg).color;
            out[0] * dc[0] + out[1] * dc[1] + out[2] * dc[2]
        };
        let (gd, gc) = composite_vjp(&ts, &dens, &cols, 2.4, bg, dc);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = dens;
            let mut m = dens;
            p[k] += h;
            m[k] -= h;
            let fd = (f(&p, &cols) - f(&m, &cols)) / (2.0 * h);
            assert!((fd - gd[k]).abs() < 1e-8, "density {k}: {fd} vs {}", gd[k]);
            for ch in 0..3 {
                let mut p = cols;
                let mut m = cols;
                p[k][ch] += h;
                m[k][ch] -= h;
                let fd = (f(&dens, &p) - f(&dens, &m)) / (2.0 * h);
                assert!((fd - gc[k][ch]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        use crate::field::{FieldConfig, RadianceFieldParams};
        let mut params = RadianceFieldParams::init(FieldConfig {
            pe_position_freqs: 2,
            pe_direction_freqs: 1,
            hidden_layers: 2,
            hidden_width: 6,
            init_seed: 3,
        })
        .unwrap();
        // Shift density up so transmittance is not trivially one.
        let bias = params.layout().density.bias_offset;
        params.values[bias] = 1.0;
        let mut cam = camera(3, 2);
        cam.pose[(2, 3)] = 1.5;
        let rays = camera_rays(&cam);
        let spec = RaySampleSpec::evaluation(0.5, 2.5, 6, [0.2, 0.4, 0.9]);
        let dc: Vec<Rgb> = (0..rays.len())
            .map(|i| [0.3 + 0.1 * i as f64, -0.7, 0.5])
            .collect();
        let f = |p: &RadianceFieldParams| {
            let out = render_rays(p, &rays, &spec).unwrap();
            out.colors
                .iter()
                .zip(&dc)
                .map(|(c, d)| c[0] * d[0] + c[1] * d[1] + c[2] * d[2])
                .sum::<f64>()
        };
        let (_, grad) = render_rays_vjp(&params, &rays, &spec, &dc).unwrap();
        let h = 1e-6;
        let n = params.len();
        let mut checked = 0;
        for k in (0..n).step_by(7).chain(n - 10..n) {
            let mut p = params.clone();
            p.values[k] += h;
            let mut m = params.clone();
            m.values[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {k}: {fd} vs {}",
                grad[k]
            );
            checked += 1;
        }
        assert!(checked > 20);
    }
}
