//! `transforms_{train,test}.json` datasets with per-frame timestamps.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ply::{points_from_vertices, read_vertices};
use crate::raster::{Camera, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub t: f64,
    pub camera: Camera,
    pub split: Split,
    pub file_path: String,
}

/// Seed points from `points.ply`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedPoints {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    pub points: Option<SeedPoints>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn train(&self) -> Vec<&Frame> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&Frame> {
        self.split(Split::Test).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub file_path: String,
    pub time: f64,
    pub transform_matrix: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_y: Option<f64>,
    pub frames: Vec<FrameRecord>,
}

fn gl_flip() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

/// Camera-to-world matrix in the `−z` forward, `+y` up convention to a
/// world-to-camera [`Camera`].
pub fn camera_from_c2w(c2w: &[[f64; 4]; 4], camera_angle_x: f64, width: usize, height: usize) -> Result<Camera> {
    let m = Matrix4::from_fn(|r, c| c2w[r][c]);
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::format("transforms", "non-finite transform_matrix"));
    }
    let rot_c2w = m.fixed_view::<3, 3>(0, 0) * gl_flip();
    let center: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
    let rotation = rot_c2w.transpose();
    Camera::from_fov(camera_angle_x, width, height, rotation, -(rotation * center))
}

pub fn c2w_from_camera(cam: &Camera) -> [[f64; 4]; 4] {
    let rot = cam.rotation.transpose() * gl_flip();
    let c = cam.center();
    let mut out = [[0.0; 4]; 4];
    for r in 0..3 {
        for k in 0..3 {
            out[r][k] = rot[(r, k)];
        }
        out[r][3] = c[r];
    }
    out[3][3] = 1.0;
    out
}

fn read_json(path: &Path) -> Result<Transforms> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_transforms(path: &Path, t: &Transforms) -> Result<()> {
    let text = serde_json::to_string_pretty(t).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn image_path(root: &Path, file_path: &str) -> PathBuf {
    let p = root.join(file_path.trim_start_matches("./"));
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Load both splits. A missing `transforms_test.json` yields an empty test
/// split; `points.ply` is read when present. Timestamps are min-max
/// normalized over all frames.
pub fn load_dnerf_dataset(root: &Path, background: [f64; 3]) -> Result<Dataset> {
    let mut frames = Vec::new();
    let mut warnings = Vec::new();
    let train_json = root.join("transforms_train.json");
    if !train_json.exists() {
        return Err(Error::io(
            &train_json,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing transforms file"),
        ));
    }
    for split in [Split::Train, Split::Test] {
        let path = root.join(format!("transforms_{}.json", split.name()));
        if !path.exists() {
            continue;
        }
        let tf = read_json(&path)?;
        if !(tf.camera_angle_x > 0.0 && tf.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::format("transforms", format!("{}: camera_angle_x {}", path.display(), tf.camera_angle_x)));
        }
        for rec in &tf.frames {
            let image = Image::load_png(&image_path(root, &rec.file_path), background)?;
            let camera = camera_from_c2w(&rec.transform_matrix, tf.camera_angle_x, image.width, image.height)?;
            if let Some(ay) = tf.camera_angle_y {
                let fy = 0.5 * image.height as f64 / (0.5 * ay).tan();
                if (fy - camera.fx).abs() > 1e-6 * camera.fx {
                    return Err(Error::format(
                        "transforms",
                        format!("{}: non-square pixels (fx {} vs fy {fy})", rec.file_path, camera.fx),
                    ));
                }
            }
            if !rec.time.is_finite() {
                return Err(Error::format("transforms", format!("{}: non-finite time", rec.file_path)));
            }
            frames.push(Frame {
                image,
                t: rec.time,
                camera,
                split,
                file_path: rec.file_path.clone(),
            });
        }
    }
    if let Some(f) = frames.first() {
        let (w, h) = (f.image.width, f.image.height);
        if let Some(bad) = frames.iter().find(|g| g.image.width != w || g.image.height != h) {
            return Err(Error::format(
                "dataset",
                format!("{} is {}x{}, expected {w}x{h}", bad.file_path, bad.image.width, bad.image.height),
            ));
        }
    }
    let lo = frames.iter().map(|f| f.t).fold(f64::INFINITY, f64::min);
    let hi = frames.iter().map(|f| f.t).fold(f64::NEG_INFINITY, f64::max);
    if hi > lo && (lo != 0.0 || hi != 1.0) {
        warnings.push(format!("timestamps rescaled from [{lo}, {hi}] to [0, 1]"));
        for f in &mut frames {
            f.t = (f.t - lo) / (hi - lo);
        }
    } else if hi == lo && !frames.is_empty() {
        for f in &mut frames {
            f.t = 0.0;
        }
    }
    let ply = root.join("points.ply");
    let points = if ply.exists() {
        let (positions, colors) = points_from_vertices(&read_vertices(&ply)?)?;
        Some(SeedPoints { positions, colors })
    } else {
        None
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        frames,
        points,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pose_looks_down_negative_z() {
        let mut id = [[0.0; 4]; 4];
        (0..4).for_each(|i| id[i][i] = 1.0);
        let cam = camera_from_c2w(&id, std::f64::consts::FRAC_PI_2, 800, 800).unwrap();
        assert_eq!(cam.center(), Vector3::zeros());
        assert!((cam.fx - 400.0).abs() < 1e-9);
        let p = cam.world_to_camera(&Vector3::new(0.0, 0.0, -2.0));
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        // World +y is up, which is image −y.
        assert!(cam.world_to_camera(&Vector3::new(0.0, 1.0, -2.0)).y < 0.0);
    }

    #[test]
    fn c2w_roundtrip() {
        let cam = Camera::look_at(
            Vector3::new(3.0, -2.0, 1.5),
            Vector3::zeros(),
            Vector3::z(),
            0.7,
            64,
            48,
        )
        .unwrap();
        let back = camera_from_c2w(&c2w_from_camera(&cam), 0.7, 64, 48).unwrap();
        assert!((back.rotation - cam.rotation).amax() < 1e-12);
        assert!((back.translation - cam.translation).amax() < 1e-12);
    }

    #[test]
    fn missing_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dnerf_dataset(dir.path(), [1.0; 3]), Err(Error::Io { .. })));
    }

    #[test]
    fn malformed_json_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("transforms_train.json"), "{\"frames\": 3}").unwrap();
        assert!(matches!(load_dnerf_dataset(dir.path(), [1.0; 3]), Err(Error::Json { .. })));
    }
}
