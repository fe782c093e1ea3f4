//! World-to-screen projection of 3D Gaussians under the local affine
//! approximation of the perspective map, with analytic derivatives.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scene::Quat;

/// Dilation added to both diagonal entries of every screen covariance (px²).
pub const LOW_PASS: f64 = 0.3;

/// Binning radius in standard deviations.
pub const RADIUS_SIGMAS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel-space mean.
    pub mean: Vector2<f64>,
    /// Camera-space depth.
    pub depth: f64,
    /// Screen covariance including the low-pass dilation.
    pub cov: Matrix2<f64>,
    /// Inverse covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub radius: f64,
    pub visible: bool,
}

impl ProjectedGaussian {
    pub fn invisible() -> Self {
        Self {
            mean: Vector2::zeros(),
            depth: 0.0,
            cov: Matrix2::zeros(),
            conic: [0.0; 3],
            radius: 0.0,
            visible: false,
        }
    }
}

pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Validation(format!("degenerate quaternion {q:?}")));
    }
    Ok(q.map(|v| v / n))
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn build_covariance(q: &Quat, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let m = rotation_matrix(&normalize_quat(q)?) * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

fn perspective_jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    )
}

pub fn project(mean: &Vector3<f64>, cov: &Matrix3<f64>, cam: &Camera, near: f64) -> ProjectedGaussian {
    let rot = cam.rotation();
    let t = rot * mean + cam.translation();
    if !(t.z > near) {
        return ProjectedGaussian::invisible();
    }
    let k = &cam.intrinsics;
    let j = perspective_jacobian(&t, k.fx, k.fy);
    let view_cov = rot * cov * rot.transpose();
    let mut cov2 = j * view_cov * j.transpose();
    cov2 = 0.5 * (cov2 + cov2.transpose());
    cov2[(0, 0)] += LOW_PASS;
    cov2[(1, 1)] += LOW_PASS;

    let det = cov2.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return ProjectedGaussian::invisible();
    }
    let conic = [cov2[(1, 1)] / det, -cov2[(0, 1)] / det, cov2[(0, 0)] / det];
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    ProjectedGaussian {
        mean: Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy),
        depth: t.z,
        cov: cov2,
        conic,
        radius: RADIUS_SIGMAS * lambda_max.sqrt(),
        visible: true,
    }
}

/// Converts a gradient on the conic coefficients `(a, b, c)` into the
/// symmetric full-matrix gradient on the screen covariance.
pub fn conic_backward(conic: &[f64; 3], grad_conic: &[f64; 3]) -> Matrix2<f64> {
    let m = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let g = Matrix2::new(grad_conic[0], 0.5 * grad_conic[1], 0.5 * grad_conic[1], grad_conic[2]);
    -(m * g * m)
}

/// Upstream gradients on the outputs of [`project`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionUpstream {
    pub mean: Vector2<f64>,
    /// Symmetric gradient with respect to the full 2x2 covariance.
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrads {
    pub position: Vector3<f64>,
    /// With respect to the stored (unnormalized) quaternion.
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
}

/// Chain rule through [`project`] and [`build_covariance`].
pub fn project_backward(
    mean: &Vector3<f64>,
    q: &Quat,
    scale: &Vector3<f64>,
    cam: &Camera,
    upstream: &ProjectionUpstream,
) -> Result<ProjectionGrads> {
    let rot_view = cam.rotation();
    let t = rot_view * mean + cam.translation();
    let k = &cam.intrinsics;
    let (fx, fy) = (k.fx, k.fy);
    let qn = normalize_quat(q)?;
    let r = rotation_matrix(&qn);
    let m = r * Matrix3::from_diagonal(scale);
    let cov = m * m.transpose();
    let view_cov = rot_view * cov * rot_view.transpose();
    let j = perspective_jacobian(&t, fx, fy);

    let g2 = 0.5 * (upstream.cov + upstream.cov.transpose());
    let g_view_cov = j.transpose() * g2 * j;
    let g_j = 2.0 * g2 * j * view_cov;
    let g_cov = rot_view.transpose() * g_view_cov * rot_view;
    let g_m = 2.0 * g_cov * m;

    let mut g_scale = Vector3::zeros();
    let mut g_r = Matrix3::zeros();
    for c in 0..3 {
        for row in 0..3 {
            g_scale[c] += g_m[(row, c)] * r[(row, c)];
            g_r[(row, c)] = g_m[(row, c)] * scale[c];
        }
    }

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = Vector3::zeros();
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    let gm = upstream.mean;
    g_t.x += gm.x * fx * iz;
    g_t.y += gm.y * fy * iz;
    g_t.z += -gm.x * fx * t.x * iz2 - gm.y * fy * t.y * iz2 + upstream.depth;

    Ok(ProjectionGrads {
        position: rot_view.transpose() * g_t,
        rotation: quat_backward(q, &qn, &g_r),
        log_scale: g_scale.component_mul(scale),
    })
}

/// Gradient on the raw quaternion from a gradient on its rotation matrix.
fn quat_backward(q: &Quat, qn: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *qn;
    let dot = |d: Matrix3<f64>| g.component_mul(&d).sum();
    #[rustfmt::skip]
    let gq = [
        dot(Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0)),
        dot(Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x)),
        dot(Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y)),
        dot(Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0)),
    ];
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let radial = gq[0] * w + gq[1] * x + gq[2] * y + gq[3] * z;
    [0, 1, 2, 3].map(|i| (gq[i] - qn[i] * radial) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, DEFAULT_FAR, DEFAULT_NEAR};
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn identity_rotation_gives_diagonal_covariance() {
        let cov = build_covariance(&[1.0, 0.0, 0.0, 0.0], &Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(cov, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let q = [FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin()];
        let cov = build_covariance(&q, &Vector3::new(1.0, 2.0, 1.0)).unwrap();
        // explicit R S Sᵀ Rᵀ with R = [[0,-1,0],[1,0,0],[0,0,1]]
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 1.0));
        let expected = r * s * s.transpose() * r.transpose();
        assert_relative_eq!(cov, expected, epsilon = 1e-14);
        assert_relative_eq!(cov, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-14);
        assert_eq!(cov, cov.transpose());
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(build_covariance(&[0.0; 4], &Vector3::repeat(1.0)).is_err());
    }

    fn axis_camera(focal: f64) -> Camera {
        Camera::new(Matrix4::identity(), Intrinsics::from_focal(focal, 33, 33), DEFAULT_NEAR, DEFAULT_FAR).unwrap()
    }

    #[test]
    fn on_axis_projection() {
        let cam = axis_camera(40.0);
        let sigma = 0.1;
        let cov = Matrix3::identity() * sigma * sigma;
        let p = project(&Vector3::new(0.0, 0.0, 2.0), &cov, &cam, DEFAULT_NEAR);
        assert!(p.visible);
        assert_eq!(p.mean, Vector2::new(16.0, 16.0));
        assert_eq!(p.depth, 2.0);
        let expected = (40.0 * sigma / 2.0f64).powi(2);
        assert_relative_eq!(p.cov[(0, 0)] - LOW_PASS, expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov[(1, 1)] - LOW_PASS, expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov[(0, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.radius, 3.0 * (expected + LOW_PASS).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let cam = axis_camera(40.0);
        let p = project(&Vector3::new(0.0, 0.0, -1.0), &Matrix3::identity(), &cam, DEFAULT_NEAR);
        assert!(!p.visible);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let cam = axis_camera(40.0);
        let g = project_backward(
            &Vector3::new(0.1, 0.2, 3.0),
            &[0.9, 0.1, 0.2, 0.3],
            &Vector3::new(0.1, 0.2, 0.3),
            &cam,
            &ProjectionUpstream::default(),
        )
        .unwrap();
        assert_eq!(g, ProjectionGrads::default());
    }

    #[test]
    fn depth_gradient_is_third_row_of_view_rotation() {
        let cam = Camera::look_at(
            Vector3::new(2.0, -1.0, 3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            Intrinsics::from_fov_x(0.8, 32, 32),
        )
        .unwrap();
        let up = ProjectionUpstream {
            depth: 1.0,
            ..Default::default()
        };
        let g = project_backward(&Vector3::new(0.1, 0.0, 0.2), &[1.0, 0.0, 0.0, 0.0], &Vector3::repeat(0.1), &cam, &up)
            .unwrap();
        let row = cam.rotation().row(2).transpose();
        assert_relative_eq!(g.position, row, epsilon = 1e-14);
    }
}
