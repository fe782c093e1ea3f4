//! Helpers shared by the integration tests.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatkit::camera::Camera;
use splatkit::density::DensityConfig;
use splatkit::geometry::edge_map;
use splatkit::image::Image;
use splatkit::loss::{composite_loss, LossWeights, StructuralLoss};
use splatkit::raster::{render, render_backward, PixelGradients, RenderSettings};
use splatkit::scene::{logit, Gaussian, GaussianSet, IDENTITY_QUAT};
use splatkit::synthetic::{front_camera, random_scene};

/// Loss setup for an end-to-end gradient check.
pub struct Objective<'a> {
    pub camera: Camera,
    pub target: Image,
    pub edges: Image,
    pub weights: LossWeights,
    pub structural: &'a dyn StructuralLoss,
    pub settings: RenderSettings,
}

impl Objective<'_> {
    pub fn value(&self, scene: &GaussianSet) -> f64 {
        let out = render(scene, &self.camera, &self.settings).unwrap();
        composite_loss(&out, &self.target, &self.edges, &self.camera, &self.weights, self.structural)
            .unwrap()
            .total
    }

    /// Analytic gradient flattened in the order of [`parameters_mut`].
    pub fn gradient(&self, scene: &GaussianSet) -> Vec<f64> {
        let out = render(scene, &self.camera, &self.settings).unwrap();
        let loss = composite_loss(&out, &self.target, &self.edges, &self.camera, &self.weights, self.structural)
            .unwrap();
        let g = render_backward(
            scene,
            &self.camera,
            &out,
            &PixelGradients {
                rgb: &loss.grad_rgb,
                accumulation: None,
                mean_depth: loss.grad_depth.as_ref(),
            },
        )
        .unwrap();
        let mut flat = Vec::new();
        for i in 0..scene.len() {
            flat.extend(g.positions[i].iter());
            flat.extend(g.rotations[i].iter());
            flat.extend(g.log_scales[i].iter());
            flat.push(g.opacities_raw[i]);
        }
        flat.extend(g.sh.iter());
        flat
    }
}

/// Mutable references to every optimizable scalar, in a fixed order.
pub fn parameters_mut(scene: &mut GaussianSet) -> Vec<&mut f64> {
    let GaussianSet {
        positions,
        rotations,
        log_scales,
        opacities_raw,
        sh,
        ..
    } = scene;
    let mut out: Vec<&mut f64> = Vec::new();
    for (((p, q), s), o) in positions
        .iter_mut()
        .zip(rotations.iter_mut())
        .zip(log_scales.iter_mut())
        .zip(opacities_raw.iter_mut())
    {
        out.extend(p.iter_mut());
        out.extend(q.iter_mut());
        out.extend(s.iter_mut());
        out.push(o);
    }
    out.extend(sh.iter_mut());
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradientCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters at which the objective is not differentiable within the
    /// probe step (one-sided differences disagree).
    pub non_smooth: usize,
}

pub const FD_STEP: f64 = 1e-6;
pub const RELATIVE_TOLERANCE: f64 = 1e-3;
pub const ABSOLUTE_FLOOR: f64 = 1e-6;

/// Central differences against the analytic gradient. Parameters where the
/// forward and backward one-sided slopes disagree by more than 1% sit on a
/// kink or a mask boundary and are counted rather than compared.
pub fn check_gradient(objective: &Objective<'_>, scene: &GaussianSet) -> GradientCheck {
    let analytic = objective.gradient(scene);
    let base = objective.value(scene);
    let mut result = GradientCheck::default();
    let count = analytic.len();
    for k in 0..count {
        let eval = |delta: f64| {
            let mut s = scene.clone();
            *parameters_mut(&mut s)[k] += delta;
            objective.value(&s)
        };
        let plus = eval(FD_STEP);
        let minus = eval(-FD_STEP);
        let forward = (plus - base) / FD_STEP;
        let backward = (base - minus) / FD_STEP;
        if (forward - backward).abs() > 1e-2 * forward.abs().max(backward.abs()) + 1e-4 {
            result.non_smooth += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[k];
        let scale = a.abs().max(numeric.abs()).max(ABSOLUTE_FLOOR / RELATIVE_TOLERANCE);
        result.max_relative_error = result.max_relative_error.max((a - numeric).abs() / scale);
        result.checked += 1;
    }
    result
}

/// A random 5-Gaussian 32x32 problem whose target is a perturbed scene.
pub fn random_problem<'a>(
    seed: u64,
    structural: &'a dyn StructuralLoss,
    normalize_mean_depth: bool,
) -> (GaussianSet, Objective<'a>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng, 5, 1).unwrap();
    let target_scene = random_scene(&mut rng, 5, 1).unwrap();
    let camera = front_camera(32, 32).unwrap();
    let settings = RenderSettings {
        normalize_mean_depth,
        ..RenderSettings::default()
    };
    let target = render(&target_scene, &camera, &settings).unwrap().rgb;
    let edges = edge_map(&target).unwrap();
    let weights = LossWeights {
        lambda_structural: 0.2,
        lambda_normal: 0.5,
        ..LossWeights::default()
    };
    (
        scene,
        Objective {
            camera,
            target,
            edges,
            weights,
            structural,
            settings,
        },
    )
}

fn gaussian(position: [f64; 3], scale: [f64; 3], opacity: f64) -> Gaussian {
    Gaussian {
        position: Vector3::from(position),
        rotation: IDENTITY_QUAT,
        log_scale: Vector3::from(scale).map(f64::ln),
        opacity_raw: logit(opacity),
        sh: vec![0.1, 0.2, 0.3],
        is_atom: false,
    }
}

pub const FIXTURE_ATOM_SCALE: f64 = 0.05;
pub const FIXTURE_SCENE_RADIUS: f64 = 10.0;
/// Halfway through warm-up, so the split threshold is half of the clone threshold.
pub const FIXTURE_ITERATION: usize = 3500;

/// One exemplar per rule of the atomized density step, with thresholds
/// straddled: prune, clone, split, atomize, and two that are left alone.
pub fn density_fixture() -> (GaussianSet, DensityConfig) {
    let cfg = DensityConfig::default();
    let gaussians = vec![
        // transparent: pruned
        gaussian([0.0, 0.0, 5.0], [0.2, 0.2, 0.2], 0.004),
        // gradient above the clone threshold, already an atom so it cannot split
        Gaussian {
            is_atom: true,
            ..gaussian([1.0, 0.0, 5.0], [FIXTURE_ATOM_SCALE; 3], 0.8)
        },
        // large, gradient between the ramped split threshold and the clone threshold
        gaussian([2.0, 0.0, 5.0], [0.3, 0.2, 0.4], 0.8),
        // thin: atomized (min scale below the atom scale)
        gaussian([3.0, 0.0, 5.0], [0.02, 0.1, 0.3], 0.8),
        // quiet and large: untouched
        gaussian([4.0, 0.0, 5.0], [0.2, 0.2, 0.2], 0.8),
        // just under the opacity, atom-size and ramped split thresholds: untouched
        gaussian([5.0, 0.0, 5.0], [0.06, 0.07, 0.08], 0.006),
    ];
    let mut scene = GaussianSet::from_gaussians(gaussians, 0, FIXTURE_ATOM_SCALE).unwrap();
    let grads = [0.0, 0.003, 0.0015, 0.0, 0.0, 0.0009];
    for (i, g) in grads.into_iter().enumerate() {
        scene.grad_accum[i] = g;
        scene.grad_views[i] = 1;
    }
    (scene, cfg)
}

/// Per-pixel `(rgb, accumulation, mean depth)` from an independent
/// sequential compositor over every Gaussian whose screen box overlaps the
/// pixel's 16x16 tile.
pub fn oracle_render(
    scene: &GaussianSet,
    cam: &Camera,
    settings: &RenderSettings,
) -> Vec<([f64; 3], f64, f64)> {
    use splatkit::projection::{build_covariance, project};
    use splatkit::raster::{evaluate_gaussian_2d, MAX_ALPHA, TRANSMITTANCE_CUTOFF};

    let (w, h) = (cam.width(), cam.height());
    let projected: Vec<_> = (0..scene.len())
        .map(|i| {
            let cov = build_covariance(&scene.rotations[i], &scene.scale(i)).unwrap();
            project(&scene.positions[i], &cov, cam, settings.near_plane)
        })
        .collect();
    let colors: Vec<[f64; 3]> = (0..scene.len())
        .map(|i| splatkit::sh::eval(scene.sh_degree(), scene.sh_of(i), &(scene.positions[i] - cam.center())).rgb)
        .collect();
    let mut order: Vec<usize> = (0..scene.len()).filter(|&i| projected[i].visible).collect();
    order.sort_by(|&a, &b| projected[a].depth.total_cmp(&projected[b].depth).then(a.cmp(&b)));

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = ((x / 16 * 16) as f64, (y / 16 * 16) as f64);
            let pixel = nalgebra::Vector2::new(x as f64, y as f64);
            let mut transmittance = 1.0;
            let mut rgb = [0.0; 3];
            let mut acc = 0.0;
            let mut depth = 0.0;
            for &i in &order {
                let p = &projected[i];
                let inside_image = p.mean.x + p.radius >= 0.0
                    && p.mean.y + p.radius >= 0.0
                    && p.mean.x - p.radius <= (w - 1) as f64
                    && p.mean.y - p.radius <= (h - 1) as f64;
                let in_tile = p.mean.x - p.radius < tx + 16.0
                    && p.mean.x + p.radius >= tx
                    && p.mean.y - p.radius < ty + 16.0
                    && p.mean.y + p.radius >= ty;
                if !(inside_image && in_tile) {
                    continue;
                }
                let alpha = (scene.opacity(i) * evaluate_gaussian_2d(&pixel, p)).min(MAX_ALPHA);
                let weight = alpha * transmittance;
                for c in 0..3 {
                    rgb[c] += weight * colors[i][c];
                }
                acc += weight;
                depth += weight * p.depth;
                transmittance *= 1.0 - alpha;
                if settings.early_termination && transmittance < TRANSMITTANCE_CUTOFF {
                    break;
                }
            }
            for c in 0..3 {
                rgb[c] += transmittance * settings.background[c];
            }
            if settings.normalize_mean_depth {
                depth = if acc > 1e-12 { depth / acc } else { settings.background_depth };
            }
            out.push((rgb, acc, depth));
        }
    }
    out
}

/// Largest deviation of a render from [`oracle_render`].
pub fn oracle_deviation(scene: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> f64 {
    let out = render(scene, cam, settings).unwrap();
    let oracle = oracle_render(scene, cam, settings);
    let w = cam.width();
    let mut worst: f64 = 0.0;
    for (k, (rgb, acc, depth)) in oracle.into_iter().enumerate() {
        let (x, y) = (k % w, k / w);
        for c in 0..3 {
            worst = worst.max((out.rgb.get(x, y, c) - rgb[c]).abs());
        }
        worst = worst.max((out.accumulation.get(x, y, 0) - acc).abs());
        worst = worst.max((out.mean_depth.get(x, y, 0) - depth).abs());
    }
    worst
}
