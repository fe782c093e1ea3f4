//! Photometric and geometric training objectives with analytic gradients.

pub mod ssim;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::GeometryMaps;
use crate::image::Image;
use crate::raster::RenderOutput;

pub use ssim::{ms_ssim, ssim};

/// A scalar loss and its gradient with respect to the first argument.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Image,
}

pub fn l1(rendered: &Image, target: &Image) -> Result<LossValue> {
    rendered.ensure_same_shape(target, "l1 inputs")?;
    let n = rendered.data().len() as f64;
    let mut grad = Image::new(rendered.width(), rendered.height(), rendered.channels());
    let mut total = 0.0;
    for ((g, a), b) in grad.data_mut().iter_mut().zip(rendered.data()).zip(target.data()) {
        let d = a - b;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossValue { value: total / n, grad })
}

/// Image-structure term of the objective, selected by name.
pub trait StructuralLoss: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, rendered: &Image, target: &Image) -> Result<LossValue>;
}

/// `1 - MS-SSIM`.
#[derive(Clone, Copy, Debug, Default)]
pub struct MsSsimLoss;

impl StructuralLoss for MsSsimLoss {
    fn name(&self) -> &'static str {
        "ms-ssim"
    }

    fn evaluate(&self, rendered: &Image, target: &Image) -> Result<LossValue> {
        let (v, g) = ms_ssim(rendered, target)?;
        Ok(LossValue {
            value: 1.0 - v,
            grad: g.map(|x| -x),
        })
    }
}

/// `(1 - SSIM) / 2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DSsimLoss;

impl StructuralLoss for DSsimLoss {
    fn name(&self) -> &'static str {
        "d-ssim"
    }

    fn evaluate(&self, rendered: &Image, target: &Image) -> Result<LossValue> {
        let (v, g) = ssim(rendered, target)?;
        Ok(LossValue {
            value: 0.5 * (1.0 - v),
            grad: g.map(|x| -0.5 * x),
        })
    }
}

/// Edge weighting `(edge - 1)^q`.
pub fn omega(edge: f64, q: u32) -> f64 {
    (edge - 1.0).powi(q as i32)
}

/// Mean over valid pixels of `curvature * omega(edge)`; the gradient is with
/// respect to the curvature map.
pub fn edge_aware_normal_loss(curvature: &Image, edge: &Image, valid: &[bool], q: u32) -> Result<LossValue> {
    curvature.ensure_same_shape(edge, "normal loss inputs")?;
    if curvature.channels() != 1 || valid.len() != curvature.pixel_count() {
        return Err(Error::Shape("normal loss expects single-channel maps and a full mask".into()));
    }
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = Image::new(curvature.width(), curvature.height(), 1);
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let n = count as f64;
    let mut total = 0.0;
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        if valid[i] {
            let w = omega(edge.data()[i], q);
            total += curvature.data()[i] * w;
            *g = w / n;
        }
    }
    Ok(LossValue { value: total / n, grad })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_structural: f64,
    pub lambda_normal: f64,
    /// Even exponent of the edge weighting.
    pub edge_tolerance: u32,
    /// Accumulation below which a pixel is excluded from the normal term.
    pub min_accumulation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_structural: 0.1,
            lambda_normal: 0.1,
            edge_tolerance: 2,
            min_accumulation: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_structural) {
            return Err(Error::Config(format!(
                "lambda_structural must lie in [0, 1], got {}",
                self.lambda_structural
            )));
        }
        if !(self.lambda_normal >= 0.0) {
            return Err(Error::Config(format!("lambda_normal must be >= 0, got {}", self.lambda_normal)));
        }
        if self.edge_tolerance < 2 || self.edge_tolerance % 2 != 0 {
            return Err(Error::Config(format!(
                "edge_tolerance must be an even integer >= 2, got {}",
                self.edge_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub total: f64,
    pub l1: f64,
    pub structural: f64,
    pub normal: f64,
    pub grad_rgb: Image,
    /// Gradient on the mean-depth map; absent when the normal term is off.
    pub grad_depth: Option<Image>,
}

/// Weighted sum of the L1, structural and edge-aware normal terms.
pub fn composite_loss(
    rendered: &RenderOutput,
    target: &Image,
    target_edges: &Image,
    cam: &Camera,
    weights: &LossWeights,
    structural: &dyn StructuralLoss,
) -> Result<CompositeLoss> {
    let lm = weights.lambda_structural;
    let photometric = l1(&rendered.rgb, target)?;
    let mut grad_rgb = photometric.grad.map(|g| (1.0 - lm) * g);
    let mut structural_value = 0.0;
    if lm > 0.0 {
        let s = structural.evaluate(&rendered.rgb, target)?;
        structural_value = s.value;
        for (a, b) in grad_rgb.data_mut().iter_mut().zip(s.grad.data()) {
            *a += lm * b;
        }
    }

    let mut normal_value = 0.0;
    let mut grad_depth = None;
    if weights.lambda_normal > 0.0 {
        let mask: Vec<bool> = rendered
            .accumulation
            .data()
            .iter()
            .map(|&a| a >= weights.min_accumulation)
            .collect();
        let maps = GeometryMaps::compute(&rendered.mean_depth, cam, Some(&mask))?;
        let n = edge_aware_normal_loss(
            &maps.curvature.curvature,
            target_edges,
            &maps.curvature.valid,
            weights.edge_tolerance,
        )?;
        normal_value = n.value;
        let scaled = n.grad.map(|g| weights.lambda_normal * g);
        grad_depth = Some(maps.backward(&rendered.mean_depth, cam, &scaled)?);
    }

    Ok(CompositeLoss {
        total: (1.0 - lm) * photometric.value + lm * structural_value + weights.lambda_normal * normal_value,
        l1: photometric.value,
        structural: structural_value,
        normal: normal_value,
        grad_rgb,
        grad_depth,
    })
}
