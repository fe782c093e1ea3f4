//! Adam with one moment buffer per parameter group.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Moment state for a group holding `width` values per Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    width: usize,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(width: usize, count: usize) -> Self {
        Self {
            width,
            step: 0,
            m: vec![0.0; width * count],
            v: vec![0.0; width * count],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.m.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` (flattened, `width` per Gaussian). Gaussians
    /// flagged in `frozen` keep both their values and their moments.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = f64>,
        lr: f64,
        frozen: Option<&[bool]>,
    ) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powf(self.step as f64);
        let c2 = 1.0 - BETA2.powf(self.step as f64);
        for (k, (p, g)) in params.zip(grads).enumerate() {
            if frozen.is_some_and(|f| f[k / self.width]) {
                continue;
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }

    /// Reorders the state after a density step; new Gaussians start at zero.
    pub fn remap(&mut self, sources: &[Option<usize>]) {
        let w = self.width;
        let mut m = vec![0.0; w * sources.len()];
        let mut v = vec![0.0; w * sources.len()];
        for (i, s) in sources.iter().enumerate() {
            if let Some(j) = *s {
                m[i * w..(i + 1) * w].copy_from_slice(&self.m[j * w..(j + 1) * w]);
                v[i * w..(i + 1) * w].copy_from_slice(&self.v[j * w..(j + 1) * w]);
            }
        }
        self.m = m;
        self.v = v;
    }

    /// Clears the moments of every Gaussian.
    pub fn reset_moments(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Log-linear interpolation from `start` to `end` over `steps`.
pub fn exponential_decay(start: f64, end: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 || start <= 0.0 || end <= 0.0 {
        return if step == 0 { start } else { end };
    }
    let t = (step as f64 / steps as f64).clamp(0.0, 1.0);
    (start.ln() * (1.0 - t) + end.ln() * t).exp()
}
