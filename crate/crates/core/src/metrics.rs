//! Image and point-cloud evaluation metrics.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::knn::KdTree;

/// Value reported in logs for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "mse inputs")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for images in [0, 1]; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn psnr_capped(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr(a, b)?.min(PSNR_CAP))
}

fn mean_nearest(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let tree = KdTree::new(to);
    let dists: Vec<f64> = from
        .par_iter()
        .map(|p| tree.nearest(p).expect("non-empty tree").0)
        .collect();
    dists.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance.
pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("chamfer distance needs two non-empty point sets".into()));
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Quadratic-time reference for [`chamfer_distance`].
pub fn chamfer_distance_brute_force(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("chamfer distance needs two non-empty point sets".into()));
    }
    let one_way = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}
