//! Pinhole cameras.
//!
//! Camera space follows the x-right, y-down, z-forward convention. Pixel
//! `(row i, column j)` has its center at image coordinates `(j, i)`, and the
//! projection matrix maps columns `0` and `W - 1` to normalized device
//! coordinates `-1` and `+1` (rows likewise), so that `x_ndc = 2j/(W-1) - 1`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

/// Axis convention of camera-to-world matrices read from disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisConvention {
    /// x right, y down, camera looks along +z.
    #[serde(alias = "colmap")]
    OpenCv,
    /// x right, y up, camera looks along -z (the synthetic-transforms layout).
    #[default]
    #[serde(alias = "blender")]
    OpenGl,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Centered intrinsics from a horizontal field of view in radians.
    pub fn from_fov_x(fov_x: f64, width: usize, height: usize) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::from_focal(fx, width, height)
    }

    pub fn from_focal(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// World to camera transform `W`.
    pub view: Matrix4<f64>,
    /// Camera to clip transform `K`.
    pub projection: Matrix4<f64>,
    /// Composed world to clip transform `T = K W`.
    pub full: Matrix4<f64>,
    full_inverse: Matrix4<f64>,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    /// Depth-scaling entries of `K`: `z_ndc = (f1 z + f2) / z`.
    pub f1: f64,
    pub f2: f64,
}

impl Camera {
    pub fn new(view: Matrix4<f64>, intrinsics: Intrinsics, near: f64, far: f64) -> Result<Self> {
        let Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        } = intrinsics;
        if width < 2 || height < 2 {
            return Err(Error::Validation(format!(
                "camera needs at least 2x2 pixels, got {width}x{height}"
            )));
        }
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Validation(format!("invalid focal lengths ({fx}, {fy})")));
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::Validation(format!("invalid clip range [{near}, {far}]")));
        }
        check_rigid(&view)?;

        let sx = 2.0 / (width as f64 - 1.0);
        let sy = 2.0 / (height as f64 - 1.0);
        let f1 = (far + near) / (far - near);
        let f2 = -2.0 * far * near / (far - near);
        #[rustfmt::skip]
        let projection = Matrix4::new(
            sx * fx, 0.0,     sx * cx - 1.0, 0.0,
            0.0,     sy * fy, sy * cy - 1.0, 0.0,
            0.0,     0.0,     f1,            f2,
            0.0,     0.0,     1.0,           0.0,
        );
        let full = projection * view;
        let full_inverse = full
            .try_inverse()
            .ok_or_else(|| Error::Validation("full projection transform is singular".into()))?;

        let camera = Self {
            view,
            projection,
            full,
            full_inverse,
            intrinsics,
            near,
            far,
            f1,
            f2,
        };
        camera.check_composition()?;
        Ok(camera)
    }

    /// Builds a camera from a camera-to-world pose in the given convention.
    pub fn from_camera_to_world(
        camera_to_world: &Matrix4<f64>,
        convention: AxisConvention,
        intrinsics: Intrinsics,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let c2w = match convention {
            AxisConvention::OpenCv => *camera_to_world,
            AxisConvention::OpenGl => {
                camera_to_world * Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, 1.0))
            }
        };
        let view = c2w
            .try_inverse()
            .ok_or_else(|| Error::Validation("camera-to-world matrix is not invertible".into()))?;
        Self::new(view, intrinsics, near, far)
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Validation("look_at eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Validation("look_at up is parallel to view direction".into()))?;
        // y points down in camera space
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let mut view = Matrix4::identity();
        view.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        view.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(view, intrinsics, DEFAULT_NEAR, DEFAULT_FAR)
    }

    fn check_composition(&self) -> Result<()> {
        let expected = self.projection * self.view;
        let scale = expected.abs().max().max(1.0);
        let err = (self.full - expected).abs().max();
        if err > 1e-10 * scale {
            return Err(Error::Validation(format!(
                "full transform deviates from K*W by {err:e}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.view.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.view.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn full_inverse(&self) -> &Matrix4<f64> {
        &self.full_inverse
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * world + self.translation()
    }

    /// Pixel coordinates and depth of a world point, `None` behind the near plane.
    pub fn project_point(&self, world: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let p = self.to_camera(world);
        if p.z <= self.near {
            return None;
        }
        let k = &self.intrinsics;
        Some((
            Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy),
            p.z,
        ))
    }
}

fn check_rigid(view: &Matrix4<f64>) -> Result<()> {
    if !view.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("view matrix has non-finite entries".into()));
    }
    let last = view.row(3);
    if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || (last[3] - 1.0).abs() > 1e-12 {
        return Err(Error::Validation("view matrix is not affine".into()));
    }
    let r = view.fixed_view::<3, 3>(0, 0);
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > 1e-8 {
        return Err(Error::Validation(format!(
            "view rotation is not orthonormal (error {err:e})"
        )));
    }
    if r.determinant() < 0.0 {
        return Err(Error::Validation("view rotation is a reflection".into()));
    }
    Ok(())
}
