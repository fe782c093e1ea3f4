//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Coefficients are stored coefficient-major: `coeffs[k * 3 + channel]`.
//! Color is `max(sum_k coeffs[k] * Y_k(dir) + 0.5, 0)`.

use nalgebra::Vector3;

pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree-0 coefficient reproducing `rgb` for every viewing direction.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / C0
}

pub fn dc_to_rgb(dc: f64) -> f64 {
    dc * C0 + 0.5
}

/// Basis values at a unit direction and their derivatives with respect to
/// the direction components.
pub fn basis_with_grad(degree: usize, d: &Vector3<f64>) -> ([f64; 16], [Vector3<f64>; 16]) {
    let mut b = [0.0; 16];
    let mut g = [Vector3::zeros(); 16];
    let (x, y, z) = (d.x, d.y, d.z);
    b[0] = C0;
    if degree >= 1 {
        b[1] = -C1 * y;
        b[2] = C1 * z;
        b[3] = -C1 * x;
        g[1] = Vector3::new(0.0, -C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, C1);
        g[3] = Vector3::new(-C1, 0.0, 0.0);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * zz - xx - yy);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (xx - yy);
        g[4] = C2[0] * Vector3::new(y, x, 0.0);
        g[5] = C2[1] * Vector3::new(0.0, z, y);
        g[6] = C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g[7] = C2[3] * Vector3::new(z, 0.0, x);
        g[8] = C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = C3[0] * y * (3.0 * xx - yy);
        b[10] = C3[1] * x * y * z;
        b[11] = C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = C3[5] * z * (xx - yy);
        b[15] = C3[6] * x * (xx - 3.0 * yy);
        g[9] = C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
        g[10] = C3[1] * Vector3::new(y * z, x * z, x * y);
        g[11] = C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
        g[12] = C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
        g[13] = C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
        g[14] = C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
        g[15] = C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
    }
    (b, g)
}

/// Color seen along `offset` (camera center to Gaussian, unnormalized).
#[derive(Clone, Copy, Debug)]
pub struct ShColor {
    pub rgb: [f64; 3],
    /// Channels whose pre-clamp value was negative.
    pub clamped: [bool; 3],
}

pub fn eval(degree: usize, coeffs: &[f64], offset: &Vector3<f64>) -> ShColor {
    let dir = offset.normalize();
    let (b, _) = basis_with_grad(degree, &dir);
    let n = num_coeffs(degree);
    let mut rgb = [0.5; 3];
    for (k, bk) in b.iter().enumerate().take(n) {
        for c in 0..3 {
            rgb[c] += coeffs[k * 3 + c] * bk;
        }
    }
    let clamped = rgb.map(|v| v < 0.0);
    ShColor {
        rgb: rgb.map(|v| v.max(0.0)),
        clamped,
    }
}

/// Backpropagates a color gradient into the coefficients (accumulated into
/// `grad_coeffs`) and returns the gradient with respect to `offset`.
pub fn eval_backward(
    degree: usize,
    coeffs: &[f64],
    offset: &Vector3<f64>,
    clamped: [bool; 3],
    grad_rgb: [f64; 3],
    grad_coeffs: &mut [f64],
) -> Vector3<f64> {
    let len = offset.norm();
    let dir = offset / len;
    let (b, g) = basis_with_grad(degree, &dir);
    let n = num_coeffs(degree);
    let grad = [0, 1, 2].map(|c| if clamped[c] { 0.0 } else { grad_rgb[c] });
    let mut grad_dir = Vector3::zeros();
    for k in 0..n {
        for c in 0..3 {
            grad_coeffs[k * 3 + c] += grad[c] * b[k];
            if k > 0 {
                grad_dir += g[k] * (grad[c] * coeffs[k * 3 + c]);
            }
        }
    }
    (grad_dir - dir * dir.dot(&grad_dir)) / len
}
