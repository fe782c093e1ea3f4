//! Synthetic scenes and cameras, and the self-recovery experiment that
//! retrains a known scene from a perturbed sparse subset of its centers.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::export::{fuse_views, FuseOptions};
use crate::geometry::GeometryMaps;
use crate::image::Image;
use crate::knn::KdTree;
use crate::metrics::{chamfer_distance, psnr_capped};
use crate::raster::{render, RenderSettings};
use crate::scene::{logit, Gaussian, GaussianSet, Quat, SfMPointCloud};
use crate::sh;
use crate::train::{initialize, train, SceneConstants, TrainConfig, TrainEvent, TrainOutput, TrainingView};

/// `count` points spread evenly over the unit sphere.
pub fn fibonacci_sphere(count: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Identity-pose camera looking down +z with focal length equal to the width.
pub fn front_camera(width: usize, height: usize) -> Result<Camera> {
    Camera::new(
        Matrix4::identity(),
        Intrinsics::from_focal(width as f64, width, height),
        crate::camera::DEFAULT_NEAR,
        crate::camera::DEFAULT_FAR,
    )
}

/// Cameras at Fibonacci directions around `target`, all looking at it.
pub fn sphere_cameras(
    count: usize,
    distance: f64,
    target: Vector3<f64>,
    intrinsics: Intrinsics,
) -> Result<Vec<Camera>> {
    fibonacci_sphere(count)
        .into_iter()
        .map(|d| {
            let up = if d.y.abs() > 0.9 { Vector3::z() } else { -Vector3::y() };
            Camera::look_at(target + d * distance, target, up, intrinsics)
        })
        .collect()
}

fn random_quat(rng: &mut impl Rng) -> Quat {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let q: [f64; 4] = std::array::from_fn(|_| normal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    q.map(|v| v / n)
}

/// Random anisotropic Gaussians in the view of [`front_camera`].
pub fn random_scene(rng: &mut impl Rng, count: usize, sh_degree: usize) -> Result<GaussianSet> {
    let coeffs = sh::num_coeffs(sh_degree);
    let gaussians: Vec<Gaussian> = (0..count)
        .map(|_| {
            let z = rng.random_range(3.0..6.0);
            Gaussian {
                position: Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z),
                rotation: random_quat(rng),
                log_scale: Vector3::from_fn(|_, _| rng.random_range(0.08f64..0.5).ln()),
                opacity_raw: rng.random_range(-1.0..2.0),
                sh: (0..3 * coeffs)
                    .map(|k| {
                        if k < 3 {
                            rng.random_range(-1.0..1.0)
                        } else {
                            rng.random_range(-0.3..0.3)
                        }
                    })
                    .collect(),
                is_atom: false,
            }
        })
        .collect();
    GaussianSet::from_gaussians(gaussians, sh_degree, f64::INFINITY)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereOptions {
    pub count: usize,
    pub radius: f64,
    /// In-plane standard deviation of each disc, relative to the radius.
    pub tangent_scale: f64,
    /// Out-of-plane standard deviation, relative to the radius.
    pub normal_scale: f64,
    pub opacity: f64,
}

impl Default for SphereOptions {
    fn default() -> Self {
        Self {
            count: 50,
            radius: 1.0,
            tangent_scale: 0.2,
            normal_scale: 0.01,
            opacity: 0.98,
        }
    }
}

const PALETTE: [[f64; 3]; 5] = [
    [0.85, 0.25, 0.2],
    [0.95, 0.8, 0.3],
    [0.2, 0.55, 0.85],
    [0.3, 0.75, 0.35],
    [0.9, 0.9, 0.9],
];

/// Piecewise-constant color by longitude band and hemisphere.
pub fn sphere_texture(direction: &Vector3<f64>) -> [f64; 3] {
    let band = ((direction.y.atan2(direction.x) + PI) / (2.0 * PI) * 4.0).floor() as usize % 4;
    let index = if direction.z > 0.6 { 4 } else { band };
    PALETTE[index]
}

/// Flat discs tangent to a sphere centred at the origin, degree-0 color only.
pub fn textured_sphere(opts: &SphereOptions) -> Result<GaussianSet> {
    let gaussians: Vec<Gaussian> = fibonacci_sphere(opts.count)
        .into_iter()
        .map(|n| {
            let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let t1 = n.cross(&helper).normalize();
            let t2 = n.cross(&t1);
            let frame = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[t1, t2, n]));
            let q = UnitQuaternion::from_rotation_matrix(&frame);
            let color = sphere_texture(&n);
            Gaussian {
                position: n * opts.radius,
                rotation: [q.w, q.i, q.j, q.k],
                log_scale: Vector3::new(
                    (opts.tangent_scale * opts.radius).ln(),
                    (opts.tangent_scale * opts.radius).ln(),
                    (opts.normal_scale * opts.radius).ln(),
                ),
                opacity_raw: logit(opts.opacity),
                sh: color.iter().map(|&c| sh::rgb_to_dc(c)).collect(),
                is_atom: false,
            }
        })
        .collect();
    GaussianSet::from_gaussians(gaussians, 0, f64::INFINITY)
}

/// Uniform samples on the sphere surface.
pub fn sphere_surface_samples(radius: f64, count: usize) -> Vec<Vector3<f64>> {
    fibonacci_sphere(count).into_iter().map(|p| p * radius).collect()
}

/// Symmetric chamfer distance between a cloud and a centred sphere: exact
/// radial distance from the cloud, nearest-neighbour distance from dense
/// surface samples.
pub fn chamfer_to_sphere(cloud: &[Vector3<f64>], radius: f64, samples: usize) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::Validation("chamfer needs a non-empty cloud".into()));
    }
    let to_sphere = cloud.iter().map(|p| (p.norm() - radius).abs()).sum::<f64>() / cloud.len() as f64;
    let tree = KdTree::new(cloud);
    let surface = sphere_surface_samples(radius, samples);
    let from_sphere = surface
        .iter()
        .filter_map(|s| tree.nearest(s).map(|(d, _)| d))
        .sum::<f64>()
        / surface.len() as f64;
    Ok(0.5 * (to_sphere + from_sphere))
}

/// How the recovery run is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryInit {
    /// Start from the ground-truth scene itself.
    GroundTruth,
    /// Simulated SfM: every `stride`-th center, jittered by `jitter` world units.
    Sparse { stride: usize, jitter: f64 },
    /// Simulated SfM: `per_gaussian` points drawn from each ground-truth
    /// Gaussian's density, jittered by `jitter` world units.
    Surface { per_gaussian: usize, jitter: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub sphere: SphereOptions,
    pub train_views: usize,
    pub held_out_views: usize,
    pub resolution: usize,
    pub camera_distance: f64,
    pub fov_x_degrees: f64,
    pub init: RecoveryInit,
    /// Gray level below which a ground-truth edge value counts as flat.
    pub flat_edge_threshold: f64,
    pub surface_samples: usize,
    /// Side length of the renders fused into the evaluation point cloud.
    pub fusion_resolution: usize,
    pub train: TrainConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        let mut train = TrainConfig {
            iterations: 3000,
            seed: 7,
            ..TrainConfig::default()
        };
        train.init.sh_degree = 0;
        train.init.initial_opacity = 0.5;
        let d = &mut train.density;
        d.densify_from = 200;
        d.densify_until = 2500;
        d.densify_interval = 100;
        d.opacity_reset_interval = 1000;
        d.atomize_until = 500;
        d.warmup_until = 500;
        d.atom_percentile = 10.0;
        Self {
            sphere: SphereOptions::default(),
            train_views: 16,
            held_out_views: 4,
            resolution: 64,
            camera_distance: 3.5,
            fov_x_degrees: 45.0,
            init: RecoveryInit::Surface {
                per_gaussian: 4,
                jitter: 0.01,
            },
            flat_edge_threshold: 0.0125,
            surface_samples: 20_000,
            fusion_resolution: 128,
            train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Mean PSNR over held-out views, capped.
    pub held_out_psnr: f64,
    /// Chamfer distance between recovered and ground-truth Gaussian centers.
    pub center_chamfer: f64,
    /// Chamfer distance from the fused cloud to the analytic sphere.
    pub surface_chamfer: f64,
    /// Mean curvature over valid held-out pixels whose ground-truth edge value is flat.
    pub flat_curvature: f64,
    pub gaussians: usize,
    pub atoms: usize,
    pub fused_points: usize,
}

/// Ground-truth scene, rendered views split into training and held-out sets.
pub struct RecoveryFixture {
    pub ground_truth: GaussianSet,
    pub train: Vec<TrainingView>,
    pub held_out: Vec<TrainingView>,
}

impl RecoveryFixture {
    pub fn new(cfg: &RecoveryConfig) -> Result<Self> {
        let ground_truth = textured_sphere(&cfg.sphere)?;
        let intr = Intrinsics::from_fov_x(cfg.fov_x_degrees.to_radians(), cfg.resolution, cfg.resolution);
        let total = cfg.train_views + cfg.held_out_views;
        let cameras = sphere_cameras(total, cfg.camera_distance * cfg.sphere.radius, Vector3::zeros(), intr)?;
        let settings = RenderSettings::default();
        let mut train = Vec::new();
        let mut held_out = Vec::new();
        // spread the held-out views evenly through the Fibonacci order
        let every = if cfg.held_out_views == 0 { usize::MAX } else { total / cfg.held_out_views };
        for (k, cam) in cameras.into_iter().enumerate() {
            let image = render(&ground_truth, &cam, &settings)?.rgb;
            let view = TrainingView::new(cam, image)?;
            if every != usize::MAX && k % every == every / 2 && held_out.len() < cfg.held_out_views {
                held_out.push(view);
            } else {
                train.push(view);
            }
        }
        Ok(Self {
            ground_truth,
            train,
            held_out,
        })
    }

    /// Initial scene and constants for `init`.
    pub fn initial_scene(&self, cfg: &RecoveryConfig) -> Result<(GaussianSet, SceneConstants)> {
        let cloud = self.sfm_cloud(cfg)?;
        if cfg.init != RecoveryInit::GroundTruth {
            return initialize(&cloud, &cfg.train);
        }
        let mut scene = self.ground_truth.clone();
        let d = crate::scene::nearest3_mean_distances(&cloud)?;
        let s0 = crate::scene::atom_scale(&d, cfg.train.density.atom_percentile)?;
        scene.set_atom_scale(s0);
        let constants = SceneConstants {
            initial_atom_scale: s0,
            scene_radius: crate::scene::scene_radius(&cloud.camera_centers)?,
        };
        Ok((scene, constants))
    }

    /// The simulated SfM points for `cfg.init`, with training camera centers.
    pub fn sfm_cloud(&self, cfg: &RecoveryConfig) -> Result<SfMPointCloud> {
        let gt = &self.ground_truth;
        let (picked, jitter, spread): (Vec<usize>, f64, bool) = match cfg.init {
            RecoveryInit::GroundTruth => ((0..gt.len()).collect(), 0.0, false),
            RecoveryInit::Sparse { stride, jitter } => ((0..gt.len()).step_by(stride.max(1)).collect(), jitter, false),
            RecoveryInit::Surface { per_gaussian, jitter } => (
                (0..gt.len()).flat_map(|i| std::iter::repeat_n(i, per_gaussian)).collect(),
                jitter,
                true,
            ),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed);
        let noise = Normal::new(0.0, jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let unit = Normal::new(0.0, 1.0).unwrap();
        let points = picked
            .iter()
            .map(|&i| {
                let mut p = gt.positions[i];
                if spread {
                    let local = gt.scale(i).component_mul(&Vector3::from_fn(|_, _| unit.sample(&mut rng)));
                    p += crate::projection::rotation_matrix(&gt.rotations[i]) * local;
                }
                if jitter > 0.0 {
                    p += Vector3::from_fn(|_, _| noise.sample(&mut rng));
                }
                p
            })
            .collect();
        let colors = picked
            .iter()
            .map(|&i| std::array::from_fn(|c| sh::dc_to_rgb(gt.sh_of(i)[c]).clamp(0.0, 1.0)))
            .collect();
        let mut cloud = SfMPointCloud::new(points, colors)?;
        cloud.camera_centers = self.train.iter().map(|v| v.camera.center()).collect();
        Ok(cloud)
    }

    /// Measures a trained scene against the fixture.
    pub fn evaluate(&self, scene: &GaussianSet, cfg: &RecoveryConfig) -> Result<RecoveryReport> {
        let settings = RenderSettings::default();
        let mut psnr_sum = 0.0;
        let mut flat_sum = 0.0;
        let mut flat_count = 0usize;
        let geometry_settings = RenderSettings {
            normalize_mean_depth: true,
            ..settings.clone()
        };
        for view in &self.held_out {
            let out = render(scene, &view.camera, &geometry_settings)?;
            psnr_sum += psnr_capped(&render(scene, &view.camera, &settings)?.rgb, &view.image)?;
            let mask: Vec<bool> = out
                .accumulation
                .data()
                .iter()
                .map(|&a| a >= cfg.train.loss.min_accumulation)
                .collect();
            let maps = GeometryMaps::compute(&out.mean_depth, &view.camera, Some(&mask))?;
            let edges: &Image = &view.edges;
            for (k, &valid) in maps.curvature.valid.iter().enumerate() {
                if valid && edges.data()[k] < cfg.flat_edge_threshold {
                    flat_sum += maps.curvature.curvature.data()[k];
                    flat_count += 1;
                }
            }
        }
        let fusion = Intrinsics::from_fov_x(
            cfg.fov_x_degrees.to_radians(),
            cfg.fusion_resolution,
            cfg.fusion_resolution,
        );
        let cameras: Vec<Camera> = self
            .train
            .iter()
            .map(|v| Camera::new(v.camera.view, fusion, v.camera.near, v.camera.far))
            .collect::<Result<_>>()?;
        let fused = fuse_views(scene, &cameras, &FuseOptions::default())?;
        Ok(RecoveryReport {
            held_out_psnr: if self.held_out.is_empty() {
                f64::NAN
            } else {
                psnr_sum / self.held_out.len() as f64
            },
            center_chamfer: chamfer_distance(&scene.positions, &self.ground_truth.positions)?,
            surface_chamfer: chamfer_to_sphere(&fused.positions, cfg.sphere.radius, cfg.surface_samples)?,
            flat_curvature: if flat_count == 0 {
                f64::NAN
            } else {
                flat_sum / flat_count as f64
            },
            gaussians: scene.len(),
            atoms: scene.is_atom.iter().filter(|&&a| a).count(),
            fused_points: fused.len(),
        })
    }
}

/// Renders the fixture, retrains from the configured initialization and
/// evaluates the result.
pub fn self_recovery_experiment(cfg: &RecoveryConfig) -> Result<(RecoveryReport, TrainOutput)> {
    let fixture = RecoveryFixture::new(cfg)?;
    let (scene, constants) = fixture.initial_scene(cfg)?;
    let mut ignore = |_: TrainEvent<'_>| Ok(());
    let output = train(scene, &fixture.train, &constants, &cfg.train, &mut ignore)?;
    let report = fixture.evaluate(&output.scene, cfg)?;
    Ok((report, output))
}
