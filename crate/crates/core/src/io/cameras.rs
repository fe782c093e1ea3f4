//! Camera rigs stored as JSON.
//!
//! ```json
//! {
//!   "camera_angle_x": 0.69,
//!   "w": 64, "h": 64,
//!   "axis_convention": "opengl",
//!   "near": 0.01, "far": 100.0,
//!   "frames": [{ "file_path": "train/000.png", "transform_matrix": [[...4 rows...]] }]
//! }
//! ```
//!
//! `transform_matrix` is camera-to-world. `file_path` is relative to the JSON file.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::camera::{AxisConvention, Camera, Intrinsics, DEFAULT_FAR, DEFAULT_NEAR};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    #[serde(default)]
    pub file_path: Option<String>,
    pub transform_matrix: [[f64; 4]; 4],
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub camera_angle_x: f64,
    pub w: usize,
    pub h: usize,
    #[serde(default)]
    pub axis_convention: AxisConvention,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub frames: Vec<FrameRecord>,
}

/// A camera together with its ground-truth image path, if any.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Option<PathBuf>,
}

impl CameraRig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Builds a rig from cameras; poses are written in this rig's convention.
    pub fn from_cameras(cameras: &[Camera], convention: AxisConvention, files: &[Option<String>]) -> Result<Self> {
        let first = cameras
            .first()
            .ok_or_else(|| Error::Validation("camera rig needs at least one camera".into()))?;
        let k = first.intrinsics;
        let camera_angle_x = 2.0 * (0.5 * k.width as f64 / k.fx).atan();
        let flip = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0));
        let frames = cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                if cam.intrinsics != k {
                    return Err(Error::Validation("camera rig requires shared intrinsics".into()));
                }
                let c2w = cam
                    .view
                    .try_inverse()
                    .ok_or_else(|| Error::Validation("view matrix is singular".into()))?;
                let c2w = match convention {
                    AxisConvention::OpenCv => c2w,
                    AxisConvention::OpenGl => c2w * flip,
                };
                let mut m = [[0.0; 4]; 4];
                for (r, row) in m.iter_mut().enumerate() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = c2w[(r, c)];
                    }
                }
                Ok(FrameRecord {
                    file_path: files.get(i).cloned().flatten(),
                    transform_matrix: m,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            camera_angle_x,
            w: k.width,
            h: k.height,
            axis_convention: convention,
            near: first.near,
            far: first.far,
            frames,
        })
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let intrinsics = Intrinsics::from_fov_x(self.camera_angle_x, self.w, self.h);
        self.frames
            .iter()
            .map(|f| {
                let m = Matrix4::from_fn(|r, c| f.transform_matrix[r][c]);
                Camera::from_camera_to_world(&m, self.axis_convention, intrinsics, self.near, self.far)
            })
            .collect()
    }

    /// Cameras with image paths resolved against `base`.
    pub fn views(&self, base: &Path) -> Result<Vec<View>> {
        Ok(self
            .cameras()?
            .into_iter()
            .zip(&self.frames)
            .map(|(camera, f)| View {
                camera,
                image: f.file_path.as_ref().map(|p| base.join(p)),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn round_trip_preserves_cameras() {
        let intr = Intrinsics::from_fov_x(0.8, 32, 24);
        let cams: Vec<Camera> = (0..3)
            .map(|i| {
                let a = i as f64;
                Camera::look_at(
                    Vector3::new(3.0 * a.cos(), 1.0, 3.0 * a.sin()),
                    Vector3::zeros(),
                    Vector3::y(),
                    intr,
                )
                .unwrap()
            })
            .collect();
        for convention in [AxisConvention::OpenGl, AxisConvention::OpenCv] {
            let rig = CameraRig::from_cameras(&cams, convention, &[]).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("cams.json");
            rig.write(&path).unwrap();
            let back = CameraRig::read(&path).unwrap().cameras().unwrap();
            for (a, b) in cams.iter().zip(&back) {
                assert!((a.view - b.view).abs().max() < 1e-12);
                assert!((a.intrinsics.fx - b.intrinsics.fx).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parse_errors_carry_a_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n  \"w\": 4,\n  \"h\": oops\n}").unwrap();
        let err = CameraRig::read(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
