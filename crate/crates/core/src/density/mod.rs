//! Adaptive density control: prune, clone, split and atomize.

mod atomized;
mod standard;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::rotation_matrix;
use crate::scene::{logit, Gaussian, GaussianSet};

pub use atomized::Atomized;
pub use standard::Standard;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// Registered name of the density strategy.
    pub strategy: String,
    pub clone_grad_threshold: f64,
    pub split_grad_threshold: f64,
    pub prune_opacity_threshold: f64,
    /// Percentile of SfM neighbour distances used as the initial atom scale.
    pub atom_percentile: f64,
    pub atomize_until: usize,
    pub warmup_until: usize,
    /// Ratio of the final to the initial atom scale.
    pub final_proportion: f64,
    /// Gaussians larger than this fraction of the scene radius are pruned.
    pub scale_cap_factor: f64,
    /// Clone/split size boundary of the standard strategy, relative to the scene radius.
    pub percent_dense: f64,
    pub split_scale_divisor: f64,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub opacity_reset_interval: usize,
    pub opacity_reset_ceiling: f64,
    /// Return atoms to ordinary, scale-optimized Gaussians once atomization ends.
    pub release_atoms: bool,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            strategy: "atomized".into(),
            clone_grad_threshold: 0.002,
            split_grad_threshold: 0.002,
            prune_opacity_threshold: 0.005,
            atom_percentile: 1.0,
            atomize_until: 7000,
            warmup_until: 7000,
            final_proportion: 0.5,
            scale_cap_factor: 0.1,
            percent_dense: 0.01,
            split_scale_divisor: 1.6,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15000,
            opacity_reset_interval: 2000,
            opacity_reset_ceiling: 0.01,
            release_atoms: true,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clone_grad_threshold", self.clone_grad_threshold),
            ("split_grad_threshold", self.split_grad_threshold),
            ("scale_cap_factor", self.scale_cap_factor),
            ("percent_dense", self.percent_dense),
            ("split_scale_divisor", self.split_scale_divisor),
            ("opacity_reset_ceiling", self.opacity_reset_ceiling),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.prune_opacity_threshold) {
            return Err(Error::Config(format!(
                "prune_opacity_threshold must lie in [0, 1), got {}",
                self.prune_opacity_threshold
            )));
        }
        if self.atomize_until == 0 || self.warmup_until == 0 {
            return Err(Error::Config("atomize_until and warmup_until must be >= 1".into()));
        }
        if !(self.final_proportion > 0.0 && self.final_proportion <= 1.0) {
            return Err(Error::Config(format!(
                "final_proportion must lie in (0, 1], got {}",
                self.final_proportion
            )));
        }
        if !(self.atom_percentile > 0.0 && self.atom_percentile <= 100.0) {
            return Err(Error::Config(format!(
                "atom_percentile must lie in (0, 100], got {}",
                self.atom_percentile
            )));
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be >= 1".into()));
        }
        if !(self.opacity_reset_ceiling < 1.0) {
            return Err(Error::Config("opacity_reset_ceiling must be < 1".into()));
        }
        Ok(())
    }
}

/// Atom scale after `iteration` steps: geometric decay from `initial` to
/// `final_proportion * initial` at `atomize_until`, constant afterwards.
pub fn atom_scale_at(iteration: usize, initial: f64, cfg: &DensityConfig) -> f64 {
    let t = iteration.min(cfg.atomize_until) as f64 / cfg.atomize_until as f64;
    initial * cfg.final_proportion.powf(t)
}

/// Split gradient threshold, ramped up linearly during warm-up.
pub fn split_threshold(iteration: usize, cfg: &DensityConfig) -> f64 {
    (iteration as f64 / cfg.warmup_until as f64 * cfg.split_grad_threshold).min(cfg.split_grad_threshold)
}

pub fn should_prune(opacity: f64, scale: &Vector3<f64>, scene_radius: f64, cfg: &DensityConfig) -> bool {
    opacity < cfg.prune_opacity_threshold || scale.max() > cfg.scale_cap_factor * scene_radius
}

pub fn should_clone(grad: f64, cfg: &DensityConfig) -> bool {
    grad >= cfg.clone_grad_threshold
}

pub fn should_split(grad: f64, scale: &Vector3<f64>, iteration: usize, atom_scale: f64, cfg: &DensityConfig) -> bool {
    grad >= split_threshold(iteration, cfg) && scale.max() > atom_scale
}

pub fn should_atomize(scale: &Vector3<f64>, iteration: usize, atom_scale: f64, cfg: &DensityConfig) -> bool {
    iteration < cfg.atomize_until && scale.min() <= atom_scale
}

/// Two children drawn from the parent's density with scales shrunk by `divisor`.
pub fn split_children(parent: &Gaussian, scale: &Vector3<f64>, divisor: f64, rng: &mut ChaCha8Rng) -> [Gaussian; 2] {
    let r = rotation_matrix(&parent.rotation);
    let child = |rng: &mut ChaCha8Rng| {
        let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let mut g = parent.clone();
        g.position = parent.position + r * scale.component_mul(&z);
        g.log_scale = (scale / divisor).map(f64::ln);
        g.is_atom = false;
        g
    };
    let a = child(rng);
    let b = child(rng);
    [a, b]
}

/// Clears every atom flag, leaving scales where they are.
pub fn release_atoms(scene: &mut GaussianSet) -> usize {
    let released = scene.is_atom.iter().filter(|&&a| a).count();
    scene.is_atom.iter_mut().for_each(|a| *a = false);
    released
}

/// Caps every opacity at `ceiling`.
pub fn reset_opacity(scene: &mut GaussianSet, ceiling: f64) {
    let cap = logit(ceiling);
    for o in &mut scene.opacities_raw {
        *o = o.min(cap);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub iteration: usize,
    pub before: usize,
    pub after: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
    pub atomized: usize,
    /// For each Gaussian after the step, its index before the step; `None`
    /// for newly created children.
    #[serde(skip)]
    pub sources: Vec<Option<usize>>,
}

impl DensityReport {
    pub const CSV_HEADER: &'static str = "iteration,count,pruned,cloned,split,atomized";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.after, self.pruned, self.cloned, self.split, self.atomized
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DensityContext<'a> {
    pub iteration: usize,
    /// Current atom scale.
    pub atom_scale: f64,
    pub scene_radius: f64,
    pub config: &'a DensityConfig,
}

/// A density-control variant selectable by name.
pub trait DensityStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether this strategy creates atom Gaussians.
    fn uses_atoms(&self) -> bool;

    fn step(&self, scene: &mut GaussianSet, ctx: &DensityContext<'_>, rng: &mut ChaCha8Rng) -> Result<DensityReport>;
}

/// Rebuilds the scene from the kept originals followed by `children`, and
/// clears the gradient statistics.
fn rebuild(scene: &mut GaussianSet, keep: &[bool], children: Vec<Gaussian>) -> Result<Vec<Option<usize>>> {
    let mut out = GaussianSet::empty(scene.sh_degree());
    out.set_atom_scale(scene.atom_scale());
    let mut sources = Vec::with_capacity(scene.len() + children.len());
    for (i, &k) in keep.iter().enumerate() {
        if k {
            out.push(scene.get(i))?;
            sources.push(Some(i));
        }
    }
    for c in children {
        out.push(c)?;
        sources.push(None);
    }
    *scene = out;
    Ok(sources)
}
