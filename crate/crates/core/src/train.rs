//! The optimization loop interleaving Adam updates with density control.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::density::{atom_scale_at, release_atoms, reset_opacity, DensityConfig, DensityContext, DensityReport};
use crate::error::{Error, Result};
use crate::geometry::edge_map;
use crate::image::Image;
use crate::io::{read_png_rgb, read_sfm_points, write_gaussians, CameraRig};
use crate::loss::{composite_loss, LossWeights};
use crate::metrics::psnr_capped;
use crate::optim::{exponential_decay, Adam};
use crate::raster::{render, render_backward, PixelGradients, RenderSettings};
use crate::registry;
use crate::scene::{atom_scale, init_gaussians, nearest3_mean_distances, scene_radius, GaussianSet, InitOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    /// Multiply the position rates by the scene radius.
    pub position_scaled_by_scene_radius: bool,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    /// Factor applied to `sh` for the coefficients above degree 0.
    pub sh_rest_factor: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            position_scaled_by_scene_radius: true,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            sh_rest_factor: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Use the standard density strategy instead of atomization.
    pub disable_atomization: bool,
    /// Set the normal-loss weight to zero.
    pub disable_normal_loss: bool,
    /// Use single-scale D-SSIM as the structural term.
    pub disable_ms_ssim: bool,
}

/// Input files, resolved relative to the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Camera rig JSON with ground-truth image paths.
    pub cameras: PathBuf,
    /// SfM points PLY.
    pub points: PathBuf,
    /// Directory for logs and checkpoints.
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub log_interval: usize,
    /// Checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Registered name of the structural loss.
    pub structural_loss: String,
    pub learning_rates: LearningRates,
    pub loss: LossWeights,
    pub density: DensityConfig,
    pub render: RenderSettings,
    pub init: InitOptions,
    pub ablation: Ablation,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 0,
            structural_loss: "ms-ssim".into(),
            learning_rates: LearningRates::default(),
            loss: LossWeights::default(),
            density: DensityConfig::default(),
            render: RenderSettings {
                normalize_mean_depth: true,
                ..RenderSettings::default()
            },
            init: InitOptions::default(),
            ablation: Ablation::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config and resolves its data paths against the file's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.cameras, &mut cfg.data.points, &mut cfg.data.output] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The configuration with ablation switches folded into the components.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.ablation.disable_atomization {
            cfg.density.strategy = "standard".into();
        }
        if cfg.ablation.disable_normal_loss {
            cfg.loss.lambda_normal = 0.0;
        }
        if cfg.ablation.disable_ms_ssim {
            cfg.structural_loss = "d-ssim".into();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.density.validate()?;
        registry::density_strategy(&self.density.strategy)?;
        registry::structural_loss(&self.structural_loss)?;
        let lr = &self.learning_rates;
        for (name, v) in [
            ("position_init", lr.position_init),
            ("position_final", lr.position_final),
            ("rotation", lr.rotation),
            ("scale", lr.scale),
            ("opacity", lr.opacity),
            ("sh", lr.sh),
            ("sh_rest_factor", lr.sh_rest_factor),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("learning rate {name} must be >= 0, got {v}")));
            }
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// A training camera with its ground-truth image and precomputed edge map.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub camera: Camera,
    pub image: Image,
    pub edges: Image,
}

impl TrainingView {
    pub fn new(camera: Camera, image: Image) -> Result<Self> {
        if image.width() != camera.width() || image.height() != camera.height() || image.channels() != 3 {
            return Err(Error::Shape(format!(
                "image {}x{}x{} does not match a {}x{} camera",
                image.width(),
                image.height(),
                image.channels(),
                camera.width(),
                camera.height()
            )));
        }
        let edges = edge_map(&image)?;
        Ok(Self { camera, image, edges })
    }
}

/// Scene-level constants fixed before training starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConstants {
    pub initial_atom_scale: f64,
    pub scene_radius: f64,
}

/// Reads the SfM points, cameras and images named in `cfg.data` and builds
/// the initial scene.
pub fn load_training_data(cfg: &TrainConfig) -> Result<(GaussianSet, Vec<TrainingView>, SceneConstants)> {
    let rig = CameraRig::read(&cfg.data.cameras)?;
    let base = cfg.data.cameras.parent().unwrap_or(Path::new("."));
    let views = rig
        .views(base)?
        .into_iter()
        .map(|v| {
            let path = v
                .image
                .ok_or_else(|| Error::Validation("training frame has no file_path".into()))?;
            TrainingView::new(v.camera, read_png_rgb(path)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cloud = read_sfm_points(&cfg.data.points)?;
    cloud.camera_centers = views.iter().map(|v| v.camera.center()).collect();
    let (scene, constants) = initialize(&cloud, cfg)?;
    Ok((scene, views, constants))
}

/// Initial Gaussians, atom scale and scene radius from SfM points.
pub fn initialize(cloud: &crate::scene::SfMPointCloud, cfg: &TrainConfig) -> Result<(GaussianSet, SceneConstants)> {
    let d = nearest3_mean_distances(cloud)?;
    let s0 = atom_scale(&d, cfg.density.atom_percentile)?;
    let radius = scene_radius(&cloud.camera_centers)?;
    let mut scene = init_gaussians(cloud, &d, &cfg.init)?;
    scene.set_atom_scale(s0);
    Ok((
        scene,
        SceneConstants {
            initial_atom_scale: s0,
            scene_radius: radius,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub structural: f64,
    pub normal: f64,
    pub psnr: f64,
    pub count: usize,
    pub atoms: usize,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iteration,loss,l1,structural,normal,psnr,count,atoms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.4},{},{}",
            self.iteration, self.loss, self.l1, self.structural, self.normal, self.psnr, self.count, self.atoms
        )
    }
}

/// Optimizer state per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub positions: Adam,
    pub rotations: Adam,
    pub log_scales: Adam,
    pub opacities: Adam,
    pub sh_dc: Adam,
    pub sh_rest: Adam,
}

impl OptimizerState {
    pub fn new(scene: &GaussianSet) -> Self {
        let n = scene.len();
        Self {
            positions: Adam::new(3, n),
            rotations: Adam::new(4, n),
            log_scales: Adam::new(3, n),
            opacities: Adam::new(1, n),
            sh_dc: Adam::new(3, n),
            sh_rest: Adam::new(scene.sh_stride() - 3, n),
        }
    }

    fn groups(&mut self) -> [&mut Adam; 6] {
        [
            &mut self.positions,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacities,
            &mut self.sh_dc,
            &mut self.sh_rest,
        ]
    }

    pub fn remap(&mut self, sources: &[Option<usize>]) {
        for g in self.groups() {
            g.remap(sources);
        }
    }
}

/// Sidecar written next to each checkpoint PLY.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub iteration: usize,
    pub atom_scale: f64,
    pub sh_degree: usize,
    pub constants: SceneConstants,
    pub optimizer: OptimizerState,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    scene: &GaussianSet,
    iteration: usize,
    constants: &SceneConstants,
    optimizer: &OptimizerState,
) -> Result<()> {
    let path = path.as_ref();
    write_gaussians(path, scene)?;
    let sidecar = CheckpointSidecar {
        iteration,
        atom_scale: scene.atom_scale(),
        sh_degree: scene.sh_degree(),
        constants: *constants,
        optimizer: optimizer.clone(),
    };
    fs::write(path.with_extension("json"), serde_json::to_string(&sidecar)?)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub scene: GaussianSet,
    pub metrics: Vec<MetricsRow>,
    pub density: Vec<DensityReport>,
    pub optimizer: OptimizerState,
}

/// Progress events delivered to an observer during training.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Metrics(&'a MetricsRow),
    Density(&'a DensityReport),
    Checkpoint { iteration: usize, scene: &'a GaussianSet, optimizer: &'a OptimizerState },
}

fn parameter_summary(scene: &GaussianSet) -> String {
    fn finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
        it.all(|v| v.is_finite())
    }
    format!(
        "count={} finite(positions={}, log_scales={}, opacities={}, sh={}) max|position|={:.3e}",
        scene.len(),
        finite(scene.positions.iter().flat_map(|p| p.iter())),
        finite(scene.log_scales.iter().flat_map(|p| p.iter())),
        finite(scene.opacities_raw.iter()),
        finite(scene.sh.iter()),
        scene.positions.iter().map(|p| p.amax()).fold(0.0, f64::max),
    )
}

/// Runs the optimization. `observer` receives metrics, density reports and
/// checkpoint requests as they occur.
pub fn train(
    mut scene: GaussianSet,
    views: &[TrainingView],
    constants: &SceneConstants,
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutput> {
    let cfg = config.effective();
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Validation("training needs at least one view".into()));
    }
    let strategy = registry::density_strategy(&cfg.density.strategy)?;
    let structural = registry::structural_loss(&cfg.structural_loss)?;
    let lr = cfg.learning_rates;
    let position_scale = if lr.position_scaled_by_scene_radius {
        constants.scene_radius
    } else {
        1.0
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = OptimizerState::new(&scene);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::new();
    let mut density_log = Vec::new();
    let stride = scene.sh_stride();

    if !strategy.uses_atoms() {
        for a in &mut scene.is_atom {
            *a = false;
        }
    }

    for iteration in 1..=cfg.iterations {
        if strategy.uses_atoms() {
            scene.set_atom_scale(atom_scale_at(iteration, constants.initial_atom_scale, &cfg.density));
            if cfg.density.release_atoms && iteration == cfg.density.atomize_until {
                release_atoms(&mut scene);
            }
        }
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view_index = order.pop().unwrap();
        let view = &views[view_index];

        let out = render(&scene, &view.camera, &cfg.render)?;
        let loss = composite_loss(&out, &view.image, &view.edges, &view.camera, &cfg.loss, structural.as_ref())?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                view: view_index,
                diagnostics: format!(
                    "l1={} structural={} normal={}; {}",
                    loss.l1,
                    loss.structural,
                    loss.normal,
                    parameter_summary(&scene)
                ),
            });
        }
        let grads = render_backward(
            &scene,
            &view.camera,
            &out,
            &PixelGradients {
                rgb: &loss.grad_rgb,
                accumulation: None,
                mean_depth: loss.grad_depth.as_ref(),
            },
        )?;
        if iteration < cfg.density.densify_until {
            grads.accumulate_into(&mut scene);
        }

        let position_lr = position_scale
            * exponential_decay(lr.position_init, lr.position_final, iteration - 1, cfg.iterations);
        optimizer.positions.step(
            scene.positions.iter_mut().flat_map(|p| p.iter_mut()),
            grads.positions.iter().flat_map(|g| g.iter().copied()),
            position_lr,
            None,
        );
        optimizer.rotations.step(
            scene.rotations.iter_mut().flat_map(|q| q.iter_mut()),
            grads.rotations.iter().flat_map(|g| g.iter().copied()),
            lr.rotation,
            None,
        );
        optimizer.log_scales.step(
            scene.log_scales.iter_mut().flat_map(|s| s.iter_mut()),
            grads.log_scales.iter().flat_map(|g| g.iter().copied()),
            lr.scale,
            Some(&scene.is_atom),
        );
        optimizer
            .opacities
            .step(scene.opacities_raw.iter_mut(), grads.opacities_raw.iter().copied(), lr.opacity, None);
        optimizer.sh_dc.step(
            scene.sh.chunks_mut(stride).flat_map(|c| c[..3].iter_mut()),
            grads.sh.chunks(stride).flat_map(|c| c[..3].iter().copied()),
            lr.sh,
            None,
        );
        if stride > 3 {
            optimizer.sh_rest.step(
                scene.sh.chunks_mut(stride).flat_map(|c| c[3..].iter_mut()),
                grads.sh.chunks(stride).flat_map(|c| c[3..].iter().copied()),
                lr.sh * lr.sh_rest_factor,
                None,
            );
        }
        if cfg!(debug_assertions) {
            scene.check_invariants()?;
        }

        let densify = &cfg.density;
        if iteration >= densify.densify_from
            && iteration < densify.densify_until
            && iteration % densify.densify_interval == 0
        {
            let ctx = DensityContext {
                iteration,
                atom_scale: scene.atom_scale(),
                scene_radius: constants.scene_radius,
                config: densify,
            };
            let report = strategy.step(&mut scene, &ctx, &mut rng)?;
            optimizer.remap(&report.sources);
            observer(TrainEvent::Density(&report))?;
            density_log.push(report);
        }
        if densify.opacity_reset_interval > 0
            && iteration % densify.opacity_reset_interval == 0
            && iteration < densify.densify_until
        {
            reset_opacity(&mut scene, densify.opacity_reset_ceiling);
            optimizer.opacities.reset_moments();
        }

        if iteration % cfg.log_interval == 0 || iteration == cfg.iterations {
            let row = MetricsRow {
                iteration,
                loss: loss.total,
                l1: loss.l1,
                structural: loss.structural,
                normal: loss.normal,
                psnr: psnr_capped(&out.rgb, &view.image)?,
                count: scene.len(),
                atoms: scene.is_atom.iter().filter(|&&a| a).count(),
            };
            observer(TrainEvent::Metrics(&row))?;
            metrics.push(row);
        }
        if cfg.checkpoint_interval > 0 && iteration % cfg.checkpoint_interval == 0 && iteration != cfg.iterations {
            observer(TrainEvent::Checkpoint {
                iteration,
                scene: &scene,
                optimizer: &optimizer,
            })?;
        }
    }
    Ok(TrainOutput {
        scene,
        metrics,
        density: density_log,
        optimizer,
    })
}

/// Trains from the files named in `cfg.data`, writing `metrics.csv`,
/// `density.csv` and checkpoints into `cfg.data.output`.
pub fn train_from_files(cfg: &TrainConfig) -> Result<TrainOutput> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let (scene, views, constants) = load_training_data(&cfg)?;
    let out_dir = &cfg.data.output;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut metrics_csv = fs::File::create(out_dir.join("metrics.csv"))?;
    writeln!(metrics_csv, "{}", MetricsRow::CSV_HEADER)?;
    let mut density_csv = fs::File::create(out_dir.join("density.csv"))?;
    writeln!(density_csv, "{}", DensityReport::CSV_HEADER)?;

    let mut observer = |event: TrainEvent<'_>| -> Result<()> {
        match event {
            TrainEvent::Metrics(row) => writeln!(metrics_csv, "{}", row.csv_row())?,
            TrainEvent::Density(report) => writeln!(density_csv, "{}", report.csv_row())?,
            TrainEvent::Checkpoint {
                iteration,
                scene,
                optimizer,
            } => write_checkpoint(
                out_dir.join(format!("checkpoint_{iteration:06}.ply")),
                scene,
                iteration,
                &constants,
                optimizer,
            )?,
        }
        Ok(())
    };
    let output = train(scene, &views, &constants, &cfg, &mut observer)?;
    write_checkpoint(
        out_dir.join("final.ply"),
        &output.scene,
        cfg.iterations,
        &constants,
        &output.optimizer,
    )?;
    Ok(output)
}
