use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use super::{
    rebuild, should_atomize, should_clone, should_prune, should_split, split_children, DensityContext, DensityReport,
    DensityStrategy,
};
use crate::error::Result;
use crate::scene::{Gaussian, GaussianSet};

/// Prune, size-unconditional clone, warm-up split and atomization, evaluated
/// over a snapshot of the population.
#[derive(Clone, Copy, Debug, Default)]
pub struct Atomized;

impl Atomized {
    fn born_atomized(child: &mut Gaussian, ctx: &DensityContext<'_>) {
        if child.is_atom || should_atomize(&child.scale(), ctx.iteration, ctx.atom_scale, ctx.config) {
            child.is_atom = true;
            child.log_scale = Vector3::repeat(ctx.atom_scale.ln());
        }
    }
}

impl DensityStrategy for Atomized {
    fn name(&self) -> &'static str {
        "atomized"
    }

    fn uses_atoms(&self) -> bool {
        true
    }

    fn step(&self, scene: &mut GaussianSet, ctx: &DensityContext<'_>, rng: &mut ChaCha8Rng) -> Result<DensityReport> {
        let cfg = ctx.config;
        scene.set_atom_scale(ctx.atom_scale);
        let n = scene.len();
        let mut report = DensityReport {
            iteration: ctx.iteration,
            before: n,
            ..Default::default()
        };
        let mut keep = vec![true; n];
        let mut children = Vec::new();

        for i in 0..n {
            let scale = scene.scale(i);
            let grad = scene.mean_grad(i);
            if should_prune(scene.opacity(i), &scale, ctx.scene_radius, cfg) {
                keep[i] = false;
                report.pruned += 1;
                continue;
            }
            if should_clone(grad, cfg) {
                let mut copy = scene.get(i);
                Self::born_atomized(&mut copy, ctx);
                children.push(copy);
                report.cloned += 1;
            }
            if should_split(grad, &scale, ctx.iteration, ctx.atom_scale, cfg) {
                let parent = scene.get(i);
                for mut c in split_children(&parent, &scale, cfg.split_scale_divisor, rng) {
                    Self::born_atomized(&mut c, ctx);
                    children.push(c);
                }
                keep[i] = false;
                report.split += 1;
                continue;
            }
            if !scene.is_atom[i] && should_atomize(&scale, ctx.iteration, ctx.atom_scale, cfg) {
                scene.is_atom[i] = true;
                scene.log_scales[i] = Vector3::repeat(ctx.atom_scale.ln());
                report.atomized += 1;
            }
        }

        report.sources = rebuild(scene, &keep, children)?;
        report.after = scene.len();
        Ok(report)
    }
}
