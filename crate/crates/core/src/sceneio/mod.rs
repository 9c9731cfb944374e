//! Datasets on disk, PLY checkpoints, synthetic scenes and metrics output.

use std::fs;
use std::path::{Component, Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::image::ImageBuffer;

mod metrics;
mod ply;
mod synth;

pub use metrics::{write_metrics, MetricsRecord, MetricsWriter, METRICS_HEADER};
pub use ply::{load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use synth::generate_synthetic_scene;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("view {view}: camera is {expected:?} but image is {actual:?}")]
    ImageDimensionMismatch {
        view: String,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("unsupported PLY: {0}")]
    UnsupportedPly(String),
    #[error("PLY property missing: {0}")]
    PropertyMissing(String),
    #[error("I/O failure on {path}: {message}")]
    IoFailure { path: PathBuf, message: String },
}

impl SceneError {
    pub(crate) fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        SceneError::IoFailure {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        SceneError::SchemaViolation {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// One entry of `cameras.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub views: Vec<ViewEntry>,
    pub near: f64,
    #[serde(default)]
    pub heldout: Vec<usize>,
}

impl ViewEntry {
    pub fn from_camera(camera: &Camera, image: String) -> Self {
        let r = camera.rotation;
        Self {
            image,
            width: camera.width,
            height: camera.height,
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: camera.translation.into(),
        }
    }
}

/// Parses and validates a `cameras.json` document. Returns the cameras in
/// entry order.
pub fn parse_cameras(text: &str) -> Result<(CamerasFile, Vec<Camera>), SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: CamerasFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        SceneError::schema(path, e.into_inner().to_string())
    })?;
    if file.views.len() < 2 {
        return Err(SceneError::schema(
            "views",
            format!("need at least 2 views, found {}", file.views.len()),
        ));
    }
    if !(file.near > 0.0 && file.near.is_finite()) {
        return Err(SceneError::schema("near", "must be positive and finite"));
    }
    let mut cameras = Vec::with_capacity(file.views.len());
    for (i, v) in file.views.iter().enumerate() {
        if !is_relative_inside(&v.image) {
            return Err(SceneError::schema(
                format!("views[{i}].image"),
                "must be a relative path inside the dataset",
            ));
        }
        let camera = Camera::new(
            Matrix3::from_row_slice(&v.rotation),
            Vector3::from(v.translation),
            v.fx,
            v.fy,
            v.cx,
            v.cy,
            v.width,
            v.height,
            file.near,
        )
        .map_err(|e| SceneError::schema(format!("views[{i}]"), e.to_string()))?;
        cameras.push(camera);
    }
    let mut seen = vec![false; file.views.len()];
    for (k, &h) in file.heldout.iter().enumerate() {
        if h >= file.views.len() || seen[h] {
            return Err(SceneError::schema(
                format!("heldout[{k}]"),
                format!("index {h} out of range or repeated"),
            ));
        }
        seen[h] = true;
    }
    if seen.iter().all(|&s| s) {
        return Err(SceneError::schema("heldout", "no training views left"));
    }
    Ok((file, cameras))
}

fn is_relative_inside(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

/// Posed images with a train/held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    /// Image paths relative to the dataset directory.
    pub image_paths: Vec<String>,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset; the views not in `heldout` form the training split.
    pub fn new(name: String, cameras: Vec<Camera>, images: Vec<ImageBuffer>, heldout: Vec<usize>) -> Self {
        let train = (0..cameras.len()).filter(|i| !heldout.contains(i)).collect();
        let image_paths = (0..cameras.len()).map(|i| format!("images/r_{i}.png")).collect();
        Self {
            name,
            cameras,
            images,
            image_paths,
            train,
            heldout,
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn near(&self) -> f64 {
        self.cameras.first().map_or(0.01, |c| c.near)
    }

    pub fn train_cameras(&self) -> Vec<Camera> {
        self.train.iter().map(|&i| self.cameras[i].clone()).collect()
    }

    pub fn cameras_file(&self) -> CamerasFile {
        CamerasFile {
            views: self
                .cameras
                .iter()
                .zip(&self.image_paths)
                .map(|(c, p)| ViewEntry::from_camera(c, p.clone()))
                .collect(),
            near: self.near(),
            heldout: self.heldout.clone(),
        }
    }
}

pub fn read_png(path: &Path) -> Result<ImageBuffer, SceneError> {
    if !path.is_file() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| SceneError::io(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageBuffer::from_rgb8(w as usize, h as usize, img.as_raw()))
}

/// Writes the image clamped to `[0, 1]` and quantized to 8 bits.
pub fn write_png(path: &Path, image: &ImageBuffer) -> Result<(), SceneError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SceneError::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SceneError::io(path, e))
}

/// Loads `cameras.json` and its PNG images from `dir`.
pub fn load_dataset(dir: &Path) -> Result<Dataset, SceneError> {
    let json_path = dir.join("cameras.json");
    if !json_path.is_file() {
        return Err(SceneError::MissingFile(json_path));
    }
    let text = fs::read_to_string(&json_path).map_err(|e| SceneError::io(&json_path, e))?;
    let (file, cameras) = parse_cameras(&text)?;
    let mut images = Vec::with_capacity(cameras.len());
    for (view, camera) in file.views.iter().zip(&cameras) {
        let img = read_png(&dir.join(&view.image))?;
        let actual = (img.width() as u32, img.height() as u32);
        if actual != (camera.width, camera.height) {
            return Err(SceneError::ImageDimensionMismatch {
                view: view.image.clone(),
                expected: (camera.width, camera.height),
                actual,
            });
        }
        images.push(img);
    }
    let name = dir
        .file_name()
        .map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned());
    let mut dataset = Dataset::new(name, cameras, images, file.heldout);
    dataset.image_paths = file.views.into_iter().map(|v| v.image).collect();
    Ok(dataset)
}

/// Writes `cameras.json` and the images (quantized to 8 bits) into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(|e| SceneError::io(dir, e))?;
    for (img, rel) in dataset.images.iter().zip(&dataset.image_paths) {
        write_png(&dir.join(rel), img)?;
    }
    let json = serde_json::to_string_pretty(&dataset.cameras_file()).expect("cameras serialize");
    let path = dir.join("cameras.json");
    fs::write(&path, json).map_err(|e| SceneError::io(&path, e))
}
