use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::{ForwardCache, RenderOutput, Tile};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::{conic_backward, project_backward, ProjectionUpstream};
use crate::scene::{GaussianSet, Quat};
use crate::sh;

/// Loss gradients with respect to the rendered maps. Median depth is not
/// differentiable and takes no gradient.
#[derive(Clone, Copy, Debug)]
pub struct PixelGradients<'a> {
    pub rgb: &'a Image,
    pub accumulation: Option<&'a Image>,
    pub mean_depth: Option<&'a Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacities_raw: Vec<f64>,
    pub sh: Vec<f64>,
    /// Norm of the positional gradient in normalized device coordinates.
    pub screen_grad: Vec<f64>,
    /// Whether the Gaussian overlapped the image in this view.
    pub on_screen: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(n: usize, sh_stride: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![Vector3::zeros(); n],
            opacities_raw: vec![0.0; n],
            sh: vec![0.0; n * sh_stride],
            screen_grad: vec![0.0; n],
            on_screen: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Adds this view's screen-space gradient norms to the density statistics.
    pub fn accumulate_into(&self, scene: &mut GaussianSet) {
        for i in 0..self.len().min(scene.len()) {
            if self.on_screen[i] {
                scene.grad_accum[i] += self.screen_grad[i];
                scene.grad_views[i] += 1;
            }
        }
    }

    /// Largest absolute entry over every parameter group.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for v in &self.positions {
            m = m.max(v.amax());
        }
        for v in &self.log_scales {
            m = m.max(v.amax());
        }
        for q in &self.rotations {
            m = q.iter().fold(m, |a, b| a.max(b.abs()));
        }
        m = self.opacities_raw.iter().fold(m, |a, b| a.max(b.abs()));
        self.sh.iter().fold(m, |a, b| a.max(b.abs()))
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

fn tile_backward(tile: &Tile, cache: &ForwardCache, grads: &PixelGradients<'_>) -> Vec<ScreenGrad> {
    let mut local = vec![ScreenGrad::default(); tile.gaussians.len()];
    let settings = &cache.settings;
    let mut transmittance = Vec::new();
    let mut values = Vec::new();
    let mut p = 0;
    for py in tile.y0..tile.y1 {
        for px in tile.x0..tile.x1 {
            let list = &tile.contributors[tile.offsets[p] as usize..tile.offsets[p + 1] as usize];
            p += 1;
            let g_rgb = [0, 1, 2].map(|c| grads.rgb.get(px, py, c));
            let g_acc = grads.accumulation.map_or(0.0, |a| a.get(px, py, 0));
            let g_depth = grads.mean_depth.map_or(0.0, |d| d.get(px, py, 0));
            if list.is_empty() || (g_rgb == [0.0; 3] && g_acc == 0.0 && g_depth == 0.0) {
                continue;
            }

            transmittance.clear();
            let mut t = 1.0;
            let mut acc = 0.0;
            let mut depth_sum = 0.0;
            for c in list {
                transmittance.push(t);
                let w = c.alpha * t;
                acc += w;
                depth_sum += w * cache.projected[tile.gaussians[c.slot as usize] as usize].depth;
                t *= 1.0 - c.alpha;
            }
            let final_t = t;

            // dL/dw_k and dL/dz_k for every contributor
            let normalized = settings.normalize_mean_depth;
            let (depth_scale, depth_mean) = if normalized {
                if acc > 1e-12 {
                    (1.0 / acc, depth_sum / acc)
                } else {
                    (0.0, 0.0)
                }
            } else {
                (1.0, 0.0)
            };
            values.clear();
            for c in list {
                let g = tile.gaussians[c.slot as usize] as usize;
                let col = cache.colors[g].rgb;
                let z = cache.projected[g].depth;
                let v = g_rgb[0] * col[0]
                    + g_rgb[1] * col[1]
                    + g_rgb[2] * col[2]
                    + g_acc
                    + g_depth * depth_scale * (z - depth_mean);
                values.push(v);
            }

            let bg = settings.background;
            let mut suffix = final_t * (g_rgb[0] * bg[0] + g_rgb[1] * bg[1] + g_rgb[2] * bg[2]);
            for k in (0..list.len()).rev() {
                let c = &list[k];
                let g = tile.gaussians[c.slot as usize] as usize;
                let t_k = transmittance[k];
                let w = c.alpha * t_k;
                let d_alpha = t_k * values[k] - suffix / (1.0 - c.alpha);
                suffix += w * values[k];

                let slot = &mut local[c.slot as usize];
                for ch in 0..3 {
                    slot.color[ch] += g_rgb[ch] * w;
                }
                slot.depth += g_depth * depth_scale * w;

                if c.saturated {
                    continue;
                }
                let opacity = cache.opacities[g];
                slot.opacity += d_alpha * c.falloff;
                let d_power = d_alpha * opacity * c.falloff;
                let proj = &cache.projected[g];
                let dx = px as f64 - proj.mean.x;
                let dy = py as f64 - proj.mean.y;
                let [a, b, cc] = proj.conic;
                slot.mean.x += d_power * (a * dx + b * dy);
                slot.mean.y += d_power * (b * dx + cc * dy);
                slot.conic[0] += -0.5 * dx * dx * d_power;
                slot.conic[1] += -dx * dy * d_power;
                slot.conic[2] += -0.5 * dy * dy * d_power;
            }
        }
    }
    local
}

/// Analytic gradients of a loss with respect to every Gaussian parameter,
/// given the loss gradients on the rendered maps.
pub fn render_backward(
    scene: &GaussianSet,
    cam: &Camera,
    out: &RenderOutput,
    grads: &PixelGradients<'_>,
) -> Result<SceneGradients> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| Error::Usage("render_backward needs the forward cache".into()))?;
    if cache.projected.len() != scene.len() {
        return Err(Error::Usage(format!(
            "forward pass saw {} gaussians, scene has {}",
            cache.projected.len(),
            scene.len()
        )));
    }
    grads.rgb.ensure_same_shape(&out.rgb, "rgb gradient")?;
    if let Some(a) = grads.accumulation {
        a.ensure_same_shape(&out.accumulation, "accumulation gradient")?;
    }
    if let Some(d) = grads.mean_depth {
        d.ensure_same_shape(&out.mean_depth, "mean depth gradient")?;
    }

    let per_tile: Vec<Vec<ScreenGrad>> = cache
        .tiles
        .par_iter()
        .map(|tile| tile_backward(tile, cache, grads))
        .collect();

    // fixed-order reduction keeps results independent of the thread count
    let mut screen = vec![ScreenGrad::default(); scene.len()];
    for (tile, local) in cache.tiles.iter().zip(&per_tile) {
        for (slot, &g) in tile.gaussians.iter().enumerate() {
            screen[g as usize].add(&local[slot]);
        }
    }

    let center = cam.center();
    let degree = scene.sh_degree();
    let stride = scene.sh_stride();
    let half_w = 0.5 * (cam.width() as f64 - 1.0);
    let half_h = 0.5 * (cam.height() as f64 - 1.0);

    type PerGaussian = (Vector3<f64>, Quat, Vector3<f64>, f64, Vec<f64>, f64);
    let per_gaussian: Vec<PerGaussian> = (0..scene.len())
        .into_par_iter()
        .map(|i| -> Result<PerGaussian> {
            let mut g_sh = vec![0.0; stride];
            if !cache.on_screen[i] {
                return Ok((Vector3::zeros(), [0.0; 4], Vector3::zeros(), 0.0, g_sh, 0.0));
            }
            let s = &screen[i];
            let offset = scene.positions[i] - center;
            let g_offset = sh::eval_backward(
                degree,
                scene.sh_of(i),
                &offset,
                cache.colors[i].clamped,
                s.color,
                &mut g_sh,
            );
            let proj = &cache.projected[i];
            let upstream = ProjectionUpstream {
                mean: s.mean,
                cov: conic_backward(&proj.conic, &s.conic),
                depth: s.depth,
            };
            let pg = project_backward(&scene.positions[i], &scene.rotations[i], &scene.scale(i), cam, &upstream)?;
            let op = cache.opacities[i];
            let screen_norm = Vector2::new(s.mean.x * half_w, s.mean.y * half_h).norm();
            Ok((
                pg.position + g_offset,
                pg.rotation,
                pg.log_scale,
                s.opacity * op * (1.0 - op),
                g_sh,
                screen_norm,
            ))
        })
        .collect::<Result<_>>()?;

    let mut result = SceneGradients::zeros(scene.len(), stride);
    for (i, (pos, rot, ls, op, sh_grad, norm)) in per_gaussian.into_iter().enumerate() {
        result.positions[i] = pos;
        result.rotations[i] = rot;
        result.log_scales[i] = ls;
        result.opacities_raw[i] = op;
        result.sh[i * stride..(i + 1) * stride].copy_from_slice(&sh_grad);
        result.screen_grad[i] = norm;
        result.on_screen[i] = cache.on_screen[i];
    }
    Ok(result)
}
