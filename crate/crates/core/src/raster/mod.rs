//! Tile-based depth-sorted alpha compositing of projected Gaussians.
//!
//! Every view is rendered into RGB, accumulation, mean-depth and
//! median-depth maps. Gaussians are sorted once per view by `(depth, index)`
//! and binned into 16x16 tiles; tiles are composited in parallel and the
//! per-pixel contributor lists are kept for the analytic backward pass.

mod backward;

pub use backward::{render_backward, PixelGradients, SceneGradients};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, DEFAULT_NEAR};
use crate::error::Result;
use crate::image::Image;
use crate::projection::{build_covariance, project, ProjectedGaussian};
use crate::scene::GaussianSet;
use crate::sh::{self, ShColor};

pub const TILE_SIZE: usize = 16;
/// Compositing stops once transmittance falls below this value.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Upper clamp on `alpha * G` before compositing.
pub const MAX_ALPHA: f64 = 0.999;
/// Transmittance at which the median depth is read off.
pub const MEDIAN_TRANSMITTANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub background_depth: f64,
    pub near_plane: f64,
    /// Divide the mean depth by the accumulation.
    pub normalize_mean_depth: bool,
    pub early_termination: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            background_depth: 0.0,
            near_plane: DEFAULT_NEAR,
            normalize_mean_depth: false,
            early_termination: true,
        }
    }
}

/// Unnormalized screen-space Gaussian `exp(-½ dᵀ Σ'⁻¹ d)` with `d = x - μ'`.
#[inline]
pub fn evaluate_gaussian_2d(x: &Vector2<f64>, g: &ProjectedGaussian) -> f64 {
    let dx = x.x - g.mean.x;
    let dy = x.y - g.mean.y;
    let [a, b, c] = g.conic;
    (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp()
}

/// One entry of a pixel's compositing list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contributor {
    /// Position in the owning tile's Gaussian list.
    pub slot: u32,
    /// Gaussian falloff `G(x)`.
    pub falloff: f64,
    /// `min(opacity * G(x), MAX_ALPHA)`.
    pub alpha: f64,
    pub saturated: bool,
}

/// A Gaussian as seen by the compositor.
#[derive(Clone, Copy, Debug)]
pub struct Splat<'a> {
    pub projected: &'a ProjectedGaussian,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct PixelValues {
    rgb: [f64; 3],
    accumulation: f64,
    mean_depth: f64,
    median_depth: f64,
    transmittance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelComposite {
    pub rgb: [f64; 3],
    pub accumulation: f64,
    pub mean_depth: f64,
    pub median_depth: f64,
    pub final_transmittance: f64,
    /// Compositing weight of every contributor that was reached.
    pub weights: Vec<f64>,
}

fn composite_with<'a>(
    x: &Vector2<f64>,
    count: usize,
    splat: impl Fn(usize) -> Splat<'a>,
    settings: &RenderSettings,
    record: &mut Vec<Contributor>,
) -> PixelValues {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut accumulation = 0.0;
    let mut depth_sum = 0.0;
    let mut median = None;
    for k in 0..count {
        let s = splat(k);
        let falloff = evaluate_gaussian_2d(x, s.projected);
        let raw = s.opacity * falloff;
        let saturated = raw > MAX_ALPHA;
        let alpha = raw.min(MAX_ALPHA);
        let w = alpha * t;
        for c in 0..3 {
            rgb[c] += s.color[c] * w;
        }
        accumulation += w;
        depth_sum += s.projected.depth * w;
        record.push(Contributor {
            slot: k as u32,
            falloff,
            alpha,
            saturated,
        });
        t *= 1.0 - alpha;
        if median.is_none() && t <= MEDIAN_TRANSMITTANCE {
            median = Some(s.projected.depth);
        }
        if settings.early_termination && t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    for c in 0..3 {
        rgb[c] += t * settings.background[c];
    }
    let mean_depth = if settings.normalize_mean_depth {
        if accumulation > 1e-12 {
            depth_sum / accumulation
        } else {
            settings.background_depth
        }
    } else {
        depth_sum
    };
    PixelValues {
        rgb,
        accumulation,
        mean_depth,
        median_depth: median.unwrap_or(settings.background_depth),
        transmittance: t,
    }
}

/// Front-to-back compositing of one pixel. `splats` must already be sorted
/// by ascending depth.
pub fn composite_pixel(x: &Vector2<f64>, splats: &[Splat<'_>], settings: &RenderSettings) -> PixelComposite {
    let mut record = Vec::with_capacity(splats.len());
    let v = composite_with(x, splats.len(), |k| splats[k], settings, &mut record);
    let mut t = 1.0;
    let weights = record
        .iter()
        .map(|c| {
            let w = c.alpha * t;
            t *= 1.0 - c.alpha;
            w
        })
        .collect();
    PixelComposite {
        rgb: v.rgb,
        accumulation: v.accumulation,
        mean_depth: v.mean_depth,
        median_depth: v.median_depth,
        final_transmittance: v.transmittance,
        weights,
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Tile {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Global Gaussian indices in compositing order.
    pub gaussians: Vec<u32>,
    /// `contributors[offsets[p]..offsets[p + 1]]` belongs to pixel `p` of the tile.
    pub offsets: Vec<u32>,
    pub contributors: Vec<Contributor>,
}

/// Forward state needed by [`render_backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) settings: RenderSettings,
    pub(crate) projected: Vec<ProjectedGaussian>,
    pub(crate) colors: Vec<ShColor>,
    pub(crate) opacities: Vec<f64>,
    pub(crate) tiles: Vec<Tile>,
    pub(crate) on_screen: Vec<bool>,
}

impl ForwardCache {
    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    /// Total number of (pixel, Gaussian) compositing entries.
    pub fn contributor_count(&self) -> usize {
        self.tiles.iter().map(|t| t.contributors.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Image,
    pub accumulation: Image,
    pub mean_depth: Image,
    pub median_depth: Image,
    pub cache: Option<ForwardCache>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    /// Drops the backward caches, keeping only the maps.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

fn view_offset(scene: &GaussianSet, i: usize, center: &Vector3<f64>) -> Vector3<f64> {
    scene.positions[i] - center
}

pub fn render(scene: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    let width = cam.width();
    let height = cam.height();
    let center = cam.center();
    let degree = scene.sh_degree();

    let prepared: Vec<(ProjectedGaussian, ShColor)> = (0..scene.len())
        .into_par_iter()
        .map(|i| -> Result<_> {
            let cov = build_covariance(&scene.rotations[i], &scene.scale(i))?;
            let p = project(&scene.positions[i], &cov, cam, settings.near_plane);
            let color = sh::eval(degree, scene.sh_of(i), &view_offset(scene, i, &center));
            Ok((p, color))
        })
        .collect::<Result<_>>()?;
    let (projected, colors): (Vec<_>, Vec<_>) = prepared.into_iter().unzip();
    let opacities: Vec<f64> = (0..scene.len()).map(|i| scene.opacity(i)).collect();

    let mut order: Vec<usize> = (0..scene.len()).filter(|&i| projected[i].visible).collect();
    order.sort_by(|&a, &b| projected[a].depth.total_cmp(&projected[b].depth).then(a.cmp(&b)));

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut on_screen = vec![false; scene.len()];
    for &i in &order {
        let p = &projected[i];
        let (lo_x, hi_x) = (p.mean.x - p.radius, p.mean.x + p.radius);
        let (lo_y, hi_y) = (p.mean.y - p.radius, p.mean.y + p.radius);
        if hi_x < 0.0 || hi_y < 0.0 || lo_x > (width - 1) as f64 || lo_y > (height - 1) as f64 {
            continue;
        }
        let tx0 = (lo_x.max(0.0) as usize / TILE_SIZE).min(tiles_x - 1);
        let tx1 = (hi_x.min((width - 1) as f64) as usize / TILE_SIZE).min(tiles_x - 1);
        let ty0 = (lo_y.max(0.0) as usize / TILE_SIZE).min(tiles_y - 1);
        let ty1 = (hi_y.min((height - 1) as f64) as usize / TILE_SIZE).min(tiles_y - 1);
        on_screen[i] = true;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let rendered: Vec<(Tile, Vec<PixelValues>)> = bins
        .into_par_iter()
        .enumerate()
        .map(|(t, gaussians)| {
            let x0 = (t % tiles_x) * TILE_SIZE;
            let y0 = (t / tiles_x) * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(width);
            let y1 = (y0 + TILE_SIZE).min(height);
            let mut offsets = Vec::with_capacity((x1 - x0) * (y1 - y0) + 1);
            let mut contributors = Vec::new();
            let mut values = Vec::with_capacity((x1 - x0) * (y1 - y0));
            offsets.push(0);
            for py in y0..y1 {
                for px in x0..x1 {
                    let x = Vector2::new(px as f64, py as f64);
                    let v = composite_with(
                        &x,
                        gaussians.len(),
                        |k| {
                            let g = gaussians[k] as usize;
                            Splat {
                                projected: &projected[g],
                                opacity: opacities[g],
                                color: colors[g].rgb,
                            }
                        },
                        settings,
                        &mut contributors,
                    );
                    values.push(v);
                    offsets.push(contributors.len() as u32);
                }
            }
            (
                Tile {
                    x0,
                    y0,
                    x1,
                    y1,
                    gaussians,
                    offsets,
                    contributors,
                },
                values,
            )
        })
        .collect();

    let mut rgb = Image::new(width, height, 3);
    let mut accumulation = Image::new(width, height, 1);
    let mut mean_depth = Image::new(width, height, 1);
    let mut median_depth = Image::new(width, height, 1);
    let mut tiles = Vec::with_capacity(rendered.len());
    for (tile, values) in rendered {
        let mut it = values.iter();
        for py in tile.y0..tile.y1 {
            for px in tile.x0..tile.x1 {
                let v = it.next().expect("one value per pixel");
                for c in 0..3 {
                    rgb.set(px, py, c, v.rgb[c]);
                }
                accumulation.set(px, py, 0, v.accumulation);
                mean_depth.set(px, py, 0, v.mean_depth);
                median_depth.set(px, py, 0, v.median_depth);
            }
        }
        tiles.push(tile);
    }

    Ok(RenderOutput {
        rgb,
        accumulation,
        mean_depth,
        median_depth,
        cache: Some(ForwardCache {
            settings: settings.clone(),
            projected,
            colors,
            opacities,
            tiles,
            on_screen,
        }),
    })
}
