//! `cameras.json` stored next to a checkpoint: the training cameras and
//! image size, so `render` can address views by index.

use std::fs;
use std::path::Path;

use gsd_core::data::{c2w_from_camera, camera_from_c2w, Dataset, FrameRecord, Split};
use gsd_core::raster::Camera;
use gsd_core::Error;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RIG_FILE: &str = "cameras.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRig {
    pub width: usize,
    pub height: usize,
    pub camera_angle_x: f64,
    pub frames: Vec<FrameRecord>,
}

/// A single view given on the command line; size and field of view fall back
/// to the rig's.
#[derive(Clone, Debug, Deserialize)]
pub struct PoseFile {
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default)]
    pub camera_angle_x: Option<f64>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
}

fn json_err(path: &Path, source: serde_json::Error) -> CliError {
    CliError::Core(Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

impl CameraRig {
    pub fn from_dataset(ds: &Dataset) -> Result<Self, CliError> {
        let train: Vec<_> = ds.split(Split::Train).collect();
        let first = train
            .first()
            .ok_or_else(|| CliError::Core(Error::format("dataset", "no training frames")))?;
        Ok(Self {
            width: first.image.width,
            height: first.image.height,
            camera_angle_x: 2.0 * first.camera.tan_half_fov_x().atan(),
            frames: train
                .iter()
                .map(|f| FrameRecord {
                    file_path: f.file_path.clone(),
                    time: f.t,
                    transform_matrix: c2w_from_camera(&f.camera),
                })
                .collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let p = dir.join(RIG_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| json_err(&p, e))?;
        fs::write(&p, text + "\n").map_err(|e| CliError::Core(Error::Io { path: p, source: e }))
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(RIG_FILE);
        let text = fs::read_to_string(&p).map_err(|e| CliError::Core(Error::Io { path: p.clone(), source: e }))?;
        serde_json::from_str(&text).map_err(|e| json_err(&p, e))
    }

    pub fn camera(&self, index: usize) -> Result<Camera, CliError> {
        let rec = self.frames.get(index).ok_or_else(|| {
            CliError::Usage(format!("camera index {index} out of range (rig has {})", self.frames.len()))
        })?;
        Ok(camera_from_c2w(&rec.transform_matrix, self.camera_angle_x, self.width, self.height)?)
    }

    /// `spec` is a camera index or the path of a [`PoseFile`].
    pub fn resolve(&self, spec: &str) -> Result<Camera, CliError> {
        if let Ok(i) = spec.parse::<usize>() {
            return self.camera(i);
        }
        let p = Path::new(spec);
        let text = fs::read_to_string(p).map_err(|e| CliError::Core(Error::Io { path: p.to_path_buf(), source: e }))?;
        let pose: PoseFile = serde_json::from_str(&text).map_err(|e| json_err(p, e))?;
        Ok(camera_from_c2w(
            &pose.transform_matrix,
            pose.camera_angle_x.unwrap_or(self.camera_angle_x),
            pose.width.unwrap_or(self.width),
            pose.height.unwrap_or(self.height),
        )?)
    }
}
