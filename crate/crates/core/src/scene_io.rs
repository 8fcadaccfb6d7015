//! Posed image datasets: `transforms.json` ingestion, camera paths, and the
//! two image stores every view carries (the immutable original capture and
//! the mutable current training image).
//!
//! Cameras look down `-z` in camera space with `x` right and `y` up; `pose`
//! is the camera-to-world transform.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};

pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 6.0;
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera-to-world transform.
    pub pose: Matrix4<f64>,
}

impl CameraModel {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Largest entry of `|R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }

    pub fn validate(&self) -> Result<()> {
        let intrinsics_ok = self.fl_x > 0.0
            && self.fl_y > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if !intrinsics_ok {
            return Err(Error::InvalidCamera(format!(
                "fl=({}, {}) c=({}, {}) size={}x{}",
                self.fl_x, self.fl_y, self.cx, self.cy, self.width, self.height
            )));
        }
        if !self.pose.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        let last = self.pose.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidCamera(format!(
                "pose last row {:?} is not (0,0,0,1)",
                last.iter().collect::<Vec<_>>()
            )));
        }
        let deviation = self.orthonormality_error();
        if deviation >= ORTHONORMAL_TOLERANCE {
            return Err(Error::NonOrthonormalPose {
                frame: 0,
                deviation,
            });
        }
        Ok(())
    }

    /// Same camera at `1/factor` resolution.
    pub fn downscaled(&self, factor: u32) -> Result<CameraModel> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor)
        {
            return Err(Error::InvalidDownscale {
                downscale: factor,
                width: self.width,
                height: self.height,
            });
        }
        let f = factor as f64;
        Ok(CameraModel {
            fl_x: self.fl_x / f,
            fl_y: self.fl_y / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
            pose: self.pose,
        })
    }

    /// Pose looking from `eye` at `target`, with `up` hinting the camera's
    /// `+y` axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix4<f64> {
        let back = (eye - target).normalize();
        let right = up.cross(&back).normalize();
        let true_up = back.cross(&right);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        pose
    }
}

/// One training viewpoint.
#[derive(Clone, Debug)]
pub struct PosedView {
    view_id: usize,
    camera: CameraModel,
    original: Arc<Image>,
    current: Image,
    edit_count: u32,
}

impl PosedView {
    pub fn new(view_id: usize, camera: CameraModel, original: Image) -> Result<Self> {
        let expected = (camera.width as usize, camera.height as usize);
        if original.dims() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: original.dims(),
            });
        }
        Ok(Self {
            view_id,
            camera,
            current: original.clone(),
            original: Arc::new(original),
            edit_count: 0,
        })
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    /// The un-edited capture. Never changes after load.
    pub fn original(&self) -> &Image {
        &self.original
    }

    pub fn original_shared(&self) -> Arc<Image> {
        Arc::clone(&self.original)
    }

    pub fn current(&self) -> &Image {
        &self.current
    }

    pub fn edit_count(&self) -> u32 {
        self.edit_count
    }
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    views: Vec<PosedView>,
    pub near: f64,
    pub far: f64,
    pub background: Rgb,
}

impl SceneDataset {
    pub fn new(views: Vec<PosedView>, near: f64, far: f64, background: Rgb) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::MalformedTransforms(format!(
                "need at least 2 views, found {}",
                views.len()
            )));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::MalformedTransforms(format!(
                "near/far must satisfy 0 < near < far, got {near}/{far}"
            )));
        }
        for (i, v) in views.iter().enumerate() {
            if v.view_id != i {
                return Err(Error::MalformedTransforms(format!(
                    "view ids must be contiguous from 0, found {} at {i}",
                    v.view_id
                )));
            }
        }
        Ok(Self {
            views,
            near,
            far,
            background,
        })
    }

    pub fn views(&self) -> &[PosedView] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, view_id: usize) -> Result<&PosedView> {
        self.views.get(view_id).ok_or(Error::UnknownView(view_id))
    }

    /// Replaces the current training image of a view. The original is left
    /// untouched and the view's edit counter is incremented.
    pub fn replace_current(&mut self, view_id: usize, image: Image) -> Result<()> {
        let view = self
            .views
            .get_mut(view_id)
            .ok_or(Error::UnknownView(view_id))?;
        view.original.ensure_same_dims(&image)?;
        if !image.is_finite() {
            return Err(Error::NonFinitePixels);
        }
        view.current = image;
        view.edit_count += 1;
        Ok(())
    }

    /// Resets every current image to its original.
    pub fn reset_current(&mut self) {
        for v in &mut self.views {
            v.current = (*v.original).clone();
            v.edit_count = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageSet {
    Original,
    Current,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl MatrixRepr {
    fn to_matrix(&self) -> Option<Matrix4<f64>> {
        let flat: Vec<f64> = match self {
            MatrixRepr::Flat(v) => v.clone(),
            MatrixRepr::Nested(rows) => {
                if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                    return None;
                }
                rows.iter().flatten().copied().collect()
            }
        };
        (flat.len() == 16).then(|| Matrix4::from_row_slice(&flat))
    }

    fn from_matrix(m: &Matrix4<f64>) -> Self {
        MatrixRepr::Flat(
            (0..4)
                .flat_map(|r| (0..4).map(move |c| m[(r, c)]))
                .collect(),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: MatrixRepr,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    fl_x: f64,
    fl_y: f64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<Rgb>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathCamera {
    fl_x: f64,
    fl_y: f64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    transform_matrix: MatrixRepr,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraPathFile {
    cameras: Vec<PathCamera>,
}

fn pixel_count(v: f64, what: &str) -> std::result::Result<u32, String> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(format!("{what} must be a positive integer, got {v}"))
    }
}

fn camera_from_parts(
    (fl_x, fl_y, cx, cy, w, h): (f64, f64, f64, f64, f64, f64),
    matrix: &MatrixRepr,
) -> std::result::Result<CameraModel, String> {
    let pose = matrix
        .to_matrix()
        .ok_or_else(|| "transform_matrix must hold 16 numbers".to_string())?;
    Ok(CameraModel {
        fl_x,
        fl_y,
        cx,
        cy,
        width: pixel_count(w, "w")?,
        height: pixel_count(h, "h")?,
        pose,
    })
}

fn validate_indexed(camera: &CameraModel, frame: usize) -> Result<()> {
    camera.validate().map_err(|e| match e {
        Error::NonOrthonormalPose { deviation, .. } => {
            Error::NonOrthonormalPose { frame, deviation }
        }
        other => other,
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn resolve_image(dir: &Path, file_path: &str) -> PathBuf {
    let direct = dir.join(file_path);
    if direct.extension().is_none() && !direct.exists() {
        direct.with_extension("png")
    } else {
        direct
    }
}

/// Loads `transforms.json` and the frames it references from `dir`.
pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let text = read_to_string(&dir.join("transforms.json"))?;
    let file: TransformsFile =
        serde_json::from_str(&text).map_err(|e| Error::MalformedTransforms(e.to_string()))?;
    if file.frames.is_empty() {
        return Err(Error::MalformedTransforms("no frames".into()));
    }
    let intrinsics = (file.fl_x, file.fl_y, file.cx, file.cy, file.w, file.h);
    let mut views = Vec::with_capacity(file.frames.len());
    for (i, frame) in file.frames.iter().enumerate() {
        let camera = camera_from_parts(intrinsics, &frame.transform_matrix)
            .map_err(|e| Error::MalformedTransforms(format!("frame {i}: {e}")))?;
        validate_indexed(&camera, i)?;
        let image = Image::read_png(&resolve_image(dir, &frame.file_path))?;
        views.push(PosedView::new(i, camera, image)?);
    }
    SceneDataset::new(
        views,
        file.near.unwrap_or(DEFAULT_NEAR),
        file.far.unwrap_or(DEFAULT_FAR),
        file.background.unwrap_or([1.0; 3]),
    )
}

/// Writes `transforms.json` plus one PNG per view under `dir/images/`.
pub fn save_scene(dataset: &SceneDataset, dir: &Path, which: ImageSet) -> Result<()> {
    let first = dataset.view(0)?.camera();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut frames = Vec::with_capacity(dataset.len());
    for view in dataset.views() {
        let cam = view.camera();
        if (cam.fl_x, cam.fl_y, cam.cx, cam.cy, cam.width, cam.height)
            != (
                first.fl_x,
                first.fl_y,
                first.cx,
                first.cy,
                first.width,
                first.height,
            )
        {
            return Err(Error::MalformedTransforms(
                "views must share intrinsics".into(),
            ));
        }
        let file_path = format!("images/frame_{:04}.png", view.view_id());
        let image = match which {
            ImageSet::Original => view.original(),
            ImageSet::Current => view.current(),
        };
        image.write_png(&dir.join(&file_path))?;
        frames.push(FrameEntry {
            file_path,
            transform_matrix: MatrixRepr::from_matrix(&cam.pose),
        });
    }
    let file = TransformsFile {
        fl_x: first.fl_x,
        fl_y: first.fl_y,
        cx: first.cx,
        cy: first.cy,
        w: first.width as f64,
        h: first.height as f64,
        near: Some(dataset.near),
        far: Some(dataset.far),
        background: Some(dataset.background),
        frames,
    };
    std::fs::write(
        dir.join("transforms.json"),
        serde_json::to_string_pretty(&file)?,
    )?;
    Ok(())
}

/// Loads an ordered list of cameras for novel-view rendering.
pub fn load_camera_path(path: &Path) -> Result<Vec<CameraModel>> {
    let text = read_to_string(path)?;
    let file: CameraPathFile =
        serde_json::from_str(&text).map_err(|e| Error::MalformedPath(e.to_string()))?;
    if file.cameras.is_empty() {
        return Err(Error::MalformedPath("empty camera list".into()));
    }
    file.cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let camera =
                camera_from_parts((c.fl_x, c.fl_y, c.cx, c.cy, c.w, c.h), &c.transform_matrix)
                    .map_err(|e| Error::MalformedPath(format!("camera {i}: {e}")))?;
            camera
                .validate()
                .map_err(|e| Error::MalformedPath(format!("camera {i}: {e}")))?;
            Ok(camera)
        })
        .collect()
}

pub fn save_camera_path(cameras: &[CameraModel], path: &Path) -> Result<()> {
    let file = CameraPathFile {
        cameras: cameras
            .iter()
            .map(|c| PathCamera {
                fl_x: c.fl_x,
                fl_y: c.fl_y,
                cx: c.cx,
                cy: c.cy,
                w: c.width as f64,
                h: c.height as f64,
                transform_matrix: MatrixRepr::from_matrix(&c.pose),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(pose: Matrix4<f64>) -> CameraModel {
        CameraModel {
            fl_x: 4.0,
            fl_y: 4.0,
            cx: 2.0,
            cy: 2.0,
            width: 4,
            height: 4,
            pose,
        }
    }

    fn dataset() -> SceneDataset {
        let views = (0..3)
            .map(|i| {
                let img = Image::filled(4, 4, [0.1 * i as f64, 0.5, 0.9]);
                PosedView::new(i, camera(Matrix4::identity()), img).unwrap()
            })
            .collect();
        SceneDataset::new(views, 0.5, 4.0, [1.0; 3]).unwrap()
    }

    #[test]
    fn replace_current_keeps_original() {
        let mut ds = dataset();
        let before = ds.view(1).unwrap().original().clone();
        let copy = before.clone();
        ds.replace_current(1, copy.clone()).unwrap();
        assert_eq!(ds.view(1).unwrap().edit_count(), 1);
        assert_eq!(ds.view(1).unwrap().current(), &copy);
        let second = Image::filled(4, 4, [0.0, 1.0, 0.0]);
        ds.replace_current(1, second.clone()).unwrap();
        let v = ds.view(1).unwrap();
        assert_eq!(v.edit_count(), 2);
        assert_eq!(v.current(), &second);
        assert_eq!(v.original(), &before);
    }

    #[test]
    fn replace_current_errors() {
        let mut ds = dataset();
        assert!(matches!(
            ds.replace_current(9, Image::filled(4, 4, [0.0; 3])),
            Err(Error::UnknownView(9))
        ));
        assert!(matches!(
            ds.replace_current(0, Image::filled(3, 4, [0.0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            ds.replace_current(0, Image::filled(4, 4, [f64::NAN, 0.0, 0.0])),
            Err(Error::NonFinitePixels)
        ));
        assert_eq!(ds.view(0).unwrap().edit_count(), 0);
    }

    #[test]
    fn scaled_rotation_is_rejected() {
        let mut pose = Matrix4::identity();
        pose[(0, 0)] = 2.0;
        pose[(1, 1)] = 2.0;
        pose[(2, 2)] = 2.0;
        assert!(matches!(
            camera(pose).validate(),
            Err(Error::NonOrthonormalPose { .. })
        ));
    }

    #[test]
    fn intrinsics_are_validated() {
        let mut c = camera(Matrix4::identity());
        c.cx = 4.0;
        assert!(matches!(c.validate(), Err(Error::InvalidCamera(_))));
        let mut c = camera(Matrix4::identity());
        c.fl_y = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn look_at_faces_target_along_minus_z() {
        let eye = Vector3::new(1.0, 2.0, 3.0);
        let pose = CameraModel::look_at(eye, Vector3::zeros(), Vector3::y());
        let forward = -pose.fixed_view::<3, 1>(0, 2).into_owned();
        let expected = (-eye).normalize();
        assert!((forward - expected).norm() < 1e-12);
        assert!(camera(pose).orthonormality_error() < 1e-12);
    }

    #[test]
    fn dataset_requires_two_views_and_valid_bounds() {
        let v = PosedView::new(
            0,
            camera(Matrix4::identity()),
            Image::filled(4, 4, [0.0; 3]),
        )
        .unwrap();
        assert!(SceneDataset::new(vec![v.clone()], 0.1, 1.0, [1.0; 3]).is_err());
        let w = PosedView::new(
            1,
            camera(Matrix4::identity()),
            Image::filled(4, 4, [0.0; 3]),
        )
        .unwrap();
        assert!(SceneDataset::new(vec![v.clone(), w.clone()], 1.0, 1.0, [1.0; 3]).is_err());
        assert!(SceneDataset::new(vec![w, v], 0.1, 1.0, [1.0; 3]).is_err());
    }

    #[test]
    fn camera_path_rejects_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("path.json");
        std::fs::write(&p, r#"{"cameras": []}"#).unwrap();
        assert!(matches!(load_camera_path(&p), Err(Error::MalformedPath(_))));
    }
}
