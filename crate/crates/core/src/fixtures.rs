//! Analytic synthetic scenes: Lambertian spheres over a flat background,
//! viewed from an orbit of look-at cameras. The same description renders
//! training views, held-out views, and color-edited ground truth.

use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::color::ColorTransform;
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::scene_io::{
    load_scene, save_camera_path, save_scene, CameraModel, ImageSet, PosedView, SceneDataset,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub n_views: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    /// Azimuth of view 0.
    pub azimuth_offset_deg: f64,
    /// Horizontal field of view.
    pub fov_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub spheres: Vec<Sphere>,
    /// Direction towards the light (normalized on use).
    pub light: [f64; 3],
    pub ambient: f64,
    pub background: Rgb,
    pub orbit: OrbitSpec,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    /// Subsamples per pixel side for antialiased ground truth.
    pub supersample: u32,
    pub seed: u64,
}

/// A ray/scene intersection.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub sphere: usize,
    pub color: Rgb,
}

impl SyntheticScene {
    /// Three colored spheres, 20 orbit views at 64x64 over white. The seed
    /// rotates the orbit phase.
    pub fn sphere_scene(seed: u64) -> Self {
        Self {
            spheres: vec![
                Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 0.7,
                    color: [0.85, 0.3, 0.2],
                },
                Sphere {
                    center: [0.75, -0.3, 0.55],
                    radius: 0.32,
                    color: [0.2, 0.7, 0.3],
                },
                Sphere {
                    center: [-0.6, 0.2, -0.65],
                    radius: 0.36,
                    color: [0.25, 0.35, 0.85],
                },
            ],
            light: [0.5, 0.8, 0.35],
            ambient: 0.35,
            background: [1.0; 3],
            orbit: OrbitSpec {
                n_views: 20,
                radius: 3.2,
                elevation_deg: 20.0,
                azimuth_offset_deg: (seed % 360) as f64 * 0.25,
                fov_deg: 40.0,
            },
            width: 64,
            height: 64,
            near: 1.6,
            far: 4.8,
            supersample: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.spheres.is_empty() {
            return bad("scene needs at least one sphere");
        }
        if self
            .spheres
            .iter()
            .any(|s| s.radius.is_nan() || s.radius <= 0.0)
        {
            return bad("sphere radii must be positive");
        }
        if self.orbit.n_views < 2 {
            return bad("orbit needs at least 2 views");
        }
        if !(self.orbit.fov_deg > 0.0 && self.orbit.fov_deg < 180.0) {
            return bad("fov must lie in (0, 180)");
        }
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return bad("resolution and supersampling must be positive");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad("need 0 < near < far");
        }
        if self.orbit.radius <= self.near {
            return bad("orbit radius must exceed near");
        }
        Ok(())
    }

    fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.orbit.fov_deg.to_radians()).tan()
    }

    /// Look-at camera on the orbit sphere, aimed at the origin.
    pub fn orbit_camera(&self, azimuth_deg: f64, elevation_deg: f64) -> CameraModel {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye =
            Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * self.orbit.radius;
        let f = self.focal();
        CameraModel {
            fl_x: f,
            fl_y: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
            pose: CameraModel::look_at(eye, Vector3::zeros(), Vector3::y()),
        }
    }

    fn view_azimuth(&self, k: f64) -> f64 {
        self.orbit.azimuth_offset_deg + 360.0 * k / self.orbit.n_views as f64
    }

    pub fn training_cameras(&self) -> Vec<CameraModel> {
        (0..self.orbit.n_views)
            .map(|k| self.orbit_camera(self.view_azimuth(k as f64), self.orbit.elevation_deg))
            .collect()
    }

    /// Novel viewpoint halfway between training views `k` and `k + 1`, at a
    /// slightly different elevation.
    pub fn held_out_camera(&self, k: usize) -> CameraModel {
        self.orbit_camera(
            self.view_azimuth(k as f64 + 0.5),
            self.orbit.elevation_deg + 5.0,
        )
    }

    /// `n` cameras on an arc starting at view 0, with equal azimuth steps of
    /// `step_deg`.
    pub fn orbit_path(&self, n: usize, step_deg: f64) -> Vec<CameraModel> {
        (0..n)
            .map(|i| {
                self.orbit_camera(
                    self.orbit.azimuth_offset_deg + step_deg * i as f64,
                    self.orbit.elevation_deg,
                )
            })
            .collect()
    }

    /// Closest sphere hit along a ray.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let light = Vector3::from(self.light).normalize();
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in self.spheres.iter().enumerate() {
            let oc = origin - Vector3::from(s.center);
            let b = oc.dot(dir);
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - c;
            if disc < 0.0 {
                continue;
            }
            let t = -b - disc.sqrt();
            if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
        best.map(|(t, i)| {
            let s = &self.spheres[i];
            let point = origin + dir * t;
            let normal = (point - Vector3::from(s.center)) / s.radius;
            let shade = self.ambient + (1.0 - self.ambient) * normal.dot(&light).max(0.0);
            Hit {
                t,
                point,
                sphere: i,
                color: s.color.map(|c| (c * shade).clamp(0.0, 1.0)),
            }
        })
    }

    fn radiance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Rgb {
        self.trace(origin, dir).map_or(self.background, |h| h.color)
    }

    /// Antialiased analytic render; `transform` is applied per pixel to
    /// produce edited ground truth.
    pub fn render(&self, camera: &CameraModel, transform: Option<&ColorTransform>) -> Image {
        let rot = camera.rotation();
        let origin = camera.position();
        let ss = self.supersample;
        let inv = 1.0 / (ss * ss) as f64;
        let img = Image::from_fn(camera.width, camera.height, |x, y| {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    let local = Vector3::new(
                        (px - camera.cx) / camera.fl_x,
                        -(py - camera.cy) / camera.fl_y,
                        -1.0,
                    );
                    let c = self.radiance(&origin, &(rot * local).normalize());
                    for k in 0..3 {
                        acc[k] += c[k] * inv;
                    }
                }
            }
            acc
        });
        match transform {
            Some(t) => t.apply_image(&img),
            None => img,
        }
    }

    /// In-memory dataset, quantized through 8 bits exactly as if it had been
    /// written to PNG and loaded back.
    pub fn dataset(&self) -> Result<SceneDataset> {
        self.validate()?;
        let views = self
            .training_cameras()
            .into_iter()
            .enumerate()
            .map(|(i, cam)| {
                let img = self.render(&cam, None);
                let q = Image::from_rgb8(img.width(), img.height(), &img.to_rgb8())?;
                PosedView::new(i, cam, q)
            })
            .collect::<Result<Vec<_>>>()?;
        SceneDataset::new(views, self.near, self.far, self.background)
    }

    /// Writes `transforms.json`, the training PNGs, and `scene.json` (this
    /// description) into `dir`, then loads the result back.
    pub fn generate(&self, dir: &Path) -> Result<SceneDataset> {
        let dataset = self.dataset()?;
        save_scene(&dataset, dir, ImageSet::Original)?;
        std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(self)?)?;
        load_scene(dir)
    }

    /// Writes an orbit camera path file.
    pub fn write_orbit_path(&self, path: &Path, n: usize, step_deg: f64) -> Result<()> {
        save_camera_path(&self.orbit_path(n, step_deg), path)
    }
}

/// Identity-pose camera helper for tests and examples.
pub fn identity_camera(width: u32, height: u32, focal: f64) -> CameraModel {
    CameraModel {
        fl_x: focal,
        fl_y: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        pose: Matrix4::identity(),
    }
}
