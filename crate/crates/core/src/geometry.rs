//! Depth unprojection and the derived normal, curvature and edge maps.
//!
//! Derivatives are central differences `(f[k+1] - f[k-1]) / 2`, one-sided at
//! the image border. Any stencil that touches an invalid pixel masks the
//! output pixel. Normals face the camera.

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;

/// Curvature scale: six channel-direction derivatives of a unit normal, each
/// at most 2 in magnitude.
pub const CURVATURE_BOUND: f64 = 4.898_979_485_566_356;
/// Edge scale: two derivatives of a luminance in [0, 1], each at most 2.
pub const EDGE_BOUND: f64 = 2.0 * std::f64::consts::SQRT_2;
/// Cross products shorter than this fraction of `|a| |b|` count as degenerate.
const DEGENERATE_CROSS: f64 = 1e-9;

/// Luminance weights for the edge map.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Per-pixel validity flags in row-major order.
pub type Mask = Vec<bool>;

/// Two-tap derivative stencil along an axis of length `len` at `k`.
#[inline]
fn stencil(k: usize, len: usize) -> [(usize, f64); 2] {
    if k == 0 {
        [(1, 1.0), (0, -1.0)]
    } else if k + 1 == len {
        [(k, 1.0), (k - 1, -1.0)]
    } else {
        [(k + 1, 0.5), (k - 1, -0.5)]
    }
}

/// Normalized device coordinate of column or row `k`.
pub fn ndc(k: usize, len: usize) -> f64 {
    2.0 * k as f64 / (len as f64 - 1.0) - 1.0
}

fn homogeneous(cam: &Camera, x: usize, y: usize, depth: f64) -> Vector4<f64> {
    let scaled = (cam.f1 * depth + cam.f2) / depth;
    cam.full_inverse() * Vector4::new(ndc(x, cam.width()), ndc(y, cam.height()), scaled, 1.0)
}

/// World point seen at pixel `(x, y)` at camera depth `depth`.
pub fn unproject_pixel(cam: &Camera, x: usize, y: usize, depth: f64) -> Vector3<f64> {
    let h = homogeneous(cam, x, y, depth);
    h.xyz() / h.w
}

/// Derivative of [`unproject_pixel`] with respect to depth.
pub fn unproject_pixel_depth_derivative(cam: &Camera, x: usize, y: usize, depth: f64) -> Vector3<f64> {
    let h = homogeneous(cam, x, y, depth);
    let column = cam.full_inverse().column(2).into_owned();
    let d_scaled = -cam.f2 / (depth * depth);
    (column.xyz() - h.xyz() * (column.w / h.w)) * (d_scaled / h.w)
}

/// World-space position map with its validity mask.
#[derive(Clone, Debug)]
pub struct PositionMap {
    pub positions: Image,
    pub valid: Mask,
}

/// Unprojects a single-channel depth map. Pixels with non-positive or
/// non-finite depth, or flagged invalid in `mask`, are left at zero and masked.
pub fn unproject_depth(depth: &Image, cam: &Camera, mask: Option<&[bool]>) -> Result<PositionMap> {
    let (w, h) = (depth.width(), depth.height());
    if depth.channels() != 1 || w != cam.width() || h != cam.height() {
        return Err(Error::Shape(format!(
            "depth map {}x{}x{} for a {}x{} camera",
            w,
            h,
            depth.channels(),
            cam.width(),
            cam.height()
        )));
    }
    if let Some(m) = mask {
        if m.len() != w * h {
            return Err(Error::Shape(format!("mask has {} entries for {} pixels", m.len(), w * h)));
        }
    }
    let mut positions = Image::new(w, h, 3);
    let mut valid = vec![false; w * h];
    positions
        .data_mut()
        .par_chunks_mut(3 * w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, row_valid))| {
            for x in 0..w {
                let d = depth.get(x, y, 0);
                let ok = d.is_finite() && d > 0.0 && mask.map_or(true, |m| m[y * w + x]);
                if ok {
                    let p = unproject_pixel(cam, x, y, d);
                    row[3 * x..3 * x + 3].copy_from_slice(p.as_slice());
                    row_valid[x] = true;
                }
            }
        });
    Ok(PositionMap { positions, valid })
}

#[inline]
fn vec3(img: &Image, x: usize, y: usize) -> Vector3<f64> {
    let p = img.pixel(x, y);
    Vector3::new(p[0], p[1], p[2])
}

/// Horizontal and vertical derivative of a 3-channel map, or `None` if a
/// stencil pixel is invalid.
fn derivatives(map: &Image, valid: &[bool], x: usize, y: usize) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let (w, h) = (map.width(), map.height());
    if !valid[y * w + x] {
        return None;
    }
    let mut dx = Vector3::zeros();
    for (k, c) in stencil(x, w) {
        if !valid[y * w + k] {
            return None;
        }
        dx += vec3(map, k, y) * c;
    }
    let mut dy = Vector3::zeros();
    for (k, c) in stencil(y, h) {
        if !valid[k * w + x] {
            return None;
        }
        dy += vec3(map, x, k) * c;
    }
    Some((dx, dy))
}

#[derive(Clone, Debug)]
pub struct NormalMap {
    pub normals: Image,
    pub valid: Mask,
}

/// Unit normals from the cross product of the position-map derivatives,
/// oriented toward the camera.
pub fn normal_map(positions: &PositionMap) -> NormalMap {
    let map = &positions.positions;
    let (w, h) = (map.width(), map.height());
    let mut normals = Image::new(w, h, 3);
    let mut valid = vec![false; w * h];
    normals
        .data_mut()
        .par_chunks_mut(3 * w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, row_valid))| {
            for x in 0..w {
                let Some((dx, dy)) = derivatives(map, &positions.valid, x, y) else {
                    continue;
                };
                let cross = dy.cross(&dx);
                let len = cross.norm();
                if !(len > DEGENERATE_CROSS * dx.norm() * dy.norm()) || !len.is_finite() {
                    continue;
                }
                row[3 * x..3 * x + 3].copy_from_slice((cross / len).as_slice());
                row_valid[x] = true;
            }
        });
    NormalMap { normals, valid }
}

#[derive(Clone, Debug)]
pub struct CurvatureMap {
    pub curvature: Image,
    pub valid: Mask,
}

fn curvature_energy(normals: &NormalMap, x: usize, y: usize) -> Option<f64> {
    derivatives(&normals.normals, &normals.valid, x, y).map(|(dx, dy)| dx.norm_squared() + dy.norm_squared())
}

/// Gradient magnitude of the normal map, scaled into [0, 1].
pub fn curvature_map(normals: &NormalMap) -> CurvatureMap {
    let (w, h) = (normals.normals.width(), normals.normals.height());
    let mut curvature = Image::new(w, h, 1);
    let mut valid = vec![false; w * h];
    curvature
        .data_mut()
        .par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, row_valid))| {
            for x in 0..w {
                if let Some(e) = curvature_energy(normals, x, y) {
                    row[x] = (e.sqrt() / CURVATURE_BOUND).min(1.0);
                    row_valid[x] = true;
                }
            }
        });
    CurvatureMap { curvature, valid }
}

/// Gradient magnitude of the luminance of an RGB image, scaled into [0, 1].
pub fn edge_map(rgb: &Image) -> Result<Image> {
    if rgb.channels() != 3 {
        return Err(Error::Shape(format!("edge map needs RGB, got {} channels", rgb.channels())));
    }
    let (w, h) = (rgb.width(), rgb.height());
    if w < 2 || h < 2 {
        return Err(Error::Shape(format!("edge map needs at least 2x2 pixels, got {w}x{h}")));
    }
    let gray = Image::from_fn(w, h, 1, |x, y, _| {
        let p = rgb.pixel(x, y);
        LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
    });
    Ok(Image::from_fn(w, h, 1, |x, y, _| {
        let gx: f64 = stencil(x, w).iter().map(|&(k, c)| c * gray.get(k, y, 0)).sum();
        let gy: f64 = stencil(y, h).iter().map(|&(k, c)| c * gray.get(x, k, 0)).sum();
        (gx.hypot(gy) / EDGE_BOUND).clamp(0.0, 1.0)
    }))
}

/// Every intermediate of the depth-to-curvature chain, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GeometryMaps {
    pub positions: PositionMap,
    pub normals: NormalMap,
    pub curvature: CurvatureMap,
}

impl GeometryMaps {
    pub fn compute(depth: &Image, cam: &Camera, mask: Option<&[bool]>) -> Result<Self> {
        let positions = unproject_depth(depth, cam, mask)?;
        let normals = normal_map(&positions);
        let curvature = curvature_map(&normals);
        Ok(Self {
            positions,
            normals,
            curvature,
        })
    }

    /// Backpropagates a curvature-map gradient to the depth map.
    pub fn backward(&self, depth: &Image, cam: &Camera, grad_curvature: &Image) -> Result<Image> {
        grad_curvature.ensure_same_shape(&self.curvature.curvature, "curvature gradient")?;
        let (w, h) = (depth.width(), depth.height());
        let normals = &self.normals;
        let positions = &self.positions;

        // curvature -> normals
        let mut grad_normals = vec![Vector3::zeros(); w * h];
        for y in 0..h {
            for x in 0..w {
                let g = grad_curvature.get(x, y, 0);
                if g == 0.0 || !self.curvature.valid[y * w + x] {
                    continue;
                }
                let Some((dx, dy)) = derivatives(&normals.normals, &normals.valid, x, y) else {
                    continue;
                };
                let magnitude = (dx.norm_squared() + dy.norm_squared()).sqrt();
                if magnitude == 0.0 || magnitude / CURVATURE_BOUND > 1.0 {
                    continue;
                }
                let scale = g / (CURVATURE_BOUND * magnitude);
                for (k, c) in stencil(x, w) {
                    grad_normals[y * w + k] += dx * (scale * c);
                }
                for (k, c) in stencil(y, h) {
                    grad_normals[k * w + x] += dy * (scale * c);
                }
            }
        }

        // normals -> positions
        let mut grad_positions = vec![Vector3::zeros(); w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let g = grad_normals[i];
                if !normals.valid[i] || g == Vector3::zeros() {
                    continue;
                }
                let Some((dx, dy)) = derivatives(&positions.positions, &positions.valid, x, y) else {
                    continue;
                };
                let cross = dy.cross(&dx);
                let len = cross.norm();
                let n = cross / len;
                let g_cross = (g - n * n.dot(&g)) / len;
                let g_dy = dx.cross(&g_cross);
                let g_dx = g_cross.cross(&dy);
                for (k, c) in stencil(x, w) {
                    grad_positions[y * w + k] += g_dx * c;
                }
                for (k, c) in stencil(y, h) {
                    grad_positions[k * w + x] += g_dy * c;
                }
            }
        }

        // positions -> depth
        Ok(Image::from_fn(w, h, 1, |x, y, _| {
            let i = y * w + x;
            if !positions.valid[i] || grad_positions[i] == Vector3::zeros() {
                return 0.0;
            }
            grad_positions[i].dot(&unproject_pixel_depth_derivative(cam, x, y, depth.get(x, y, 0)))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Camera, Intrinsics};
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::new(Matrix4::identity(), Intrinsics::from_fov_x(1.0, w, h), 0.01, 100.0).unwrap()
    }

    fn all_valid(w: usize, h: usize) -> NormalMap {
        NormalMap {
            normals: Image::new(w, h, 3),
            valid: vec![true; w * h],
        }
    }

    #[test]
    fn corner_pixels_map_to_unit_ndc() {
        assert_eq!(ndc(0, 17), -1.0);
        assert_eq!(ndc(16, 17), 1.0);
        assert_eq!(ndc(8, 17), 0.0);
    }

    #[test]
    fn unproject_inverts_projection() {
        let cam = Camera::look_at(
            Vector3::new(1.0, -2.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            Intrinsics::from_fov_x(0.9, 40, 30),
        )
        .unwrap();
        let world = Vector3::new(0.2, 0.1, -0.3);
        let (pix, depth) = cam.project_point(&world).unwrap();
        // evaluate the unprojection at the exact sub-pixel location
        let ray = |px: f64, py: f64| {
            let x_n = 2.0 * px / (cam.width() as f64 - 1.0) - 1.0;
            let y_n = 2.0 * py / (cam.height() as f64 - 1.0) - 1.0;
            let s = (cam.f1 * depth + cam.f2) / depth;
            let h = cam.full_inverse() * Vector4::new(x_n, y_n, s, 1.0);
            h.xyz() / h.w
        };
        let back = ray(pix.x, pix.y);
        assert!((back - world).norm() < 1e-9);
    }

    #[test]
    fn constant_depth_is_planar_and_faces_camera() {
        let cam = camera(24, 20);
        let depth = Image::filled(24, 20, 1, 5.0);
        let maps = GeometryMaps::compute(&depth, &cam, None).unwrap();
        for y in 0..20 {
            for x in 0..24 {
                assert!((maps.positions.positions.get(x, y, 2) - 5.0).abs() < 1e-6);
                let n = vec3(&maps.normals.normals, x, y);
                assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9, "{n:?}");
                assert!(maps.curvature.curvature.get(x, y, 0) < 1e-9);
            }
        }
    }

    #[test]
    fn tilted_plane_has_constant_normal() {
        // plane x + z = 4 seen head on: depth z satisfies x(z) + z = 4
        let cam = camera(32, 32);
        let depth = Image::from_fn(32, 32, 1, |x, _, _| {
            let k = &cam.intrinsics;
            let slope = (x as f64 - k.cx) / k.fx;
            4.0 / (1.0 + slope)
        });
        let maps = GeometryMaps::compute(&depth, &cam, None).unwrap();
        let expected = Vector3::new(-1.0, 0.0, -1.0).normalize();
        for y in 0..32 {
            for x in 0..32 {
                let n = vec3(&maps.normals.normals, x, y);
                assert!((n - expected).norm() < 1e-6, "({x}, {y}) {n:?}");
            }
        }
    }

    #[test]
    fn zero_depth_is_masked_with_its_neighbours() {
        let cam = camera(10, 10);
        let mut depth = Image::filled(10, 10, 1, 3.0);
        depth.set(5, 5, 0, 0.0);
        let maps = GeometryMaps::compute(&depth, &cam, None).unwrap();
        assert!(!maps.positions.valid[55]);
        for (x, y) in [(4, 5), (6, 5), (5, 4), (5, 6), (5, 5)] {
            assert!(!maps.normals.valid[y * 10 + x]);
        }
        assert!(maps.normals.valid[5 * 10 + 3]);
        assert!(!maps.curvature.valid[5 * 10 + 3]);
        assert!(maps.curvature.valid[5 * 10 + 2]);
    }

    #[test]
    fn constant_normals_have_zero_curvature() {
        let mut n = all_valid(8, 8);
        for v in n.normals.data_mut().chunks_mut(3) {
            v.copy_from_slice(&[0.0, 0.6, 0.8]);
        }
        let c = curvature_map(&n);
        assert!(c.curvature.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn period_four_flip_is_the_largest_interior_value() {
        let sign = |k: usize| if k % 4 < 2 { 1.0 } else { -1.0 };
        let mut n = all_valid(12, 12);
        for y in 0..12 {
            for x in 0..12 {
                n.normals.set(x, y, 2, sign(x) * sign(y));
            }
        }
        let c = curvature_map(&n);
        for y in 1..11 {
            for x in 1..11 {
                assert_relative_eq!(c.curvature.get(x, y, 0), 2f64.sqrt() / CURVATURE_BOUND, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alternating_columns_vanish_under_central_differences() {
        let mut n = all_valid(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                n.normals.set(x, y, 2, if x % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let c = curvature_map(&n);
        assert_eq!(c.curvature.get(3, 3, 0), 0.0);
        assert_relative_eq!(c.curvature.get(0, 3, 0), 2.0 / CURVATURE_BOUND, epsilon = 1e-12);
    }

    #[test]
    fn edge_map_cases() {
        assert!(edge_map(&Image::filled(9, 9, 3, 0.4)).unwrap().data().iter().all(|&v| v == 0.0));
        let step = Image::from_fn(10, 6, 3, |x, _, _| if x < 5 { 0.0 } else { 1.0 });
        let e = edge_map(&step).unwrap();
        assert_relative_eq!(e.get(4, 3, 0), 0.5 / EDGE_BOUND, epsilon = 1e-12);
        assert_relative_eq!(e.get(5, 3, 0), 0.5 / EDGE_BOUND, epsilon = 1e-12);
        assert_eq!(e.get(2, 3, 0), 0.0);
        // a checker step in both directions saturates
        let corner = Image::from_fn(10, 10, 3, |x, y, _| if (x < 5) == (y < 5) { 0.0 } else { 1.0 });
        let e = edge_map(&corner).unwrap();
        assert!(e.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(edge_map(&Image::new(4, 4, 1)).is_err());
    }

    #[test]
    fn depth_derivative_matches_finite_differences() {
        let cam = camera(20, 16);
        let (x, y, d) = (3, 11, 2.7);
        let h = 1e-6;
        let fd = (unproject_pixel(&cam, x, y, d + h) - unproject_pixel(&cam, x, y, d - h)) / (2.0 * h);
        let analytic = unproject_pixel_depth_derivative(&cam, x, y, d);
        assert!((fd - analytic).norm() < 1e-7);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = camera(12, 10);
        let depth = Image::from_fn(12, 10, 1, |x, y, _| {
            3.0 + 0.3 * (0.7 * x as f64).sin() + 0.2 * (0.5 * y as f64).cos() + 0.01 * (x * y) as f64
        });
        let weights = Image::from_fn(12, 10, 1, |x, y, _| ((x * 7 + y * 3) % 5) as f64 * 0.2 - 0.4);
        let loss = |d: &Image| {
            let m = GeometryMaps::compute(d, &cam, None).unwrap();
            m.curvature
                .curvature
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let maps = GeometryMaps::compute(&depth, &cam, None).unwrap();
        assert!(maps.curvature.curvature.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let grad = maps.backward(&depth, &cam, &weights).unwrap();
        let h = 1e-6;
        for i in 0..depth.data().len() {
            let mut p = depth.clone();
            let mut m = depth.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = grad.data()[i];
            assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()) + 1e-7, "pixel {i}: {a} vs {fd}");
        }
    }
}
