use rand_chacha::ChaCha8Rng;

use super::{rebuild, should_prune, split_children, DensityContext, DensityReport, DensityStrategy};
use crate::error::Result;
use crate::scene::GaussianSet;

/// Size-gated clone or split with no atom Gaussians.
#[derive(Clone, Copy, Debug, Default)]
pub struct Standard;

impl DensityStrategy for Standard {
    fn name(&self) -> &'static str {
        "standard"
    }

    fn uses_atoms(&self) -> bool {
        false
    }

    fn step(&self, scene: &mut GaussianSet, ctx: &DensityContext<'_>, rng: &mut ChaCha8Rng) -> Result<DensityReport> {
        let cfg = ctx.config;
        let n = scene.len();
        let mut report = DensityReport {
            iteration: ctx.iteration,
            before: n,
            ..Default::default()
        };
        let size_limit = cfg.percent_dense * ctx.scene_radius;
        let mut keep = vec![true; n];
        let mut children = Vec::new();

        for i in 0..n {
            let scale = scene.scale(i);
            let grad = scene.mean_grad(i);
            if should_prune(scene.opacity(i), &scale, ctx.scene_radius, cfg) {
                keep[i] = false;
                report.pruned += 1;
            } else if scale.max() <= size_limit {
                if grad >= cfg.clone_grad_threshold {
                    children.push(scene.get(i));
                    report.cloned += 1;
                }
            } else if grad >= cfg.split_grad_threshold {
                let parent = scene.get(i);
                children.extend(split_children(&parent, &scale, cfg.split_scale_divisor, rng));
                keep[i] = false;
                report.split += 1;
            }
        }

        report.sources = rebuild(scene, &keep, children)?;
        report.after = scene.len();
        Ok(report)
    }
}
