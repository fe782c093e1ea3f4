//! Gaussian primitives, the scene container and initialization from sparse
//! structure-from-motion points.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::sh;

/// Rotation quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A single primitive, used when the population is rebuilt.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub opacity_raw: f64,
    /// `coeffs_per_channel * 3` values, coefficient-major.
    pub sh: Vec<f64>,
    pub is_atom: bool,
}

impl Gaussian {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_raw)
    }
}

/// Structure-of-arrays store of every primitive in the scene.
///
/// Atom Gaussians report the shared atom scale for all three axes; their
/// stored log scales are kept equal to `ln(atom_scale)` for export.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacities_raw: Vec<f64>,
    pub sh: Vec<f64>,
    pub is_atom: Vec<bool>,
    /// Sum of per-view screen-space positional gradient norms.
    pub grad_accum: Vec<f64>,
    /// Number of views contributing to `grad_accum`.
    pub grad_views: Vec<u32>,
    sh_degree: usize,
    atom_scale: f64,
}

impl GaussianSet {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacities_raw: Vec::new(),
            sh: Vec::new(),
            is_atom: Vec::new(),
            grad_accum: Vec::new(),
            grad_views: Vec::new(),
            sh_degree,
            atom_scale: f64::INFINITY,
        }
    }

    pub fn from_gaussians(
        gaussians: impl IntoIterator<Item = Gaussian>,
        sh_degree: usize,
        atom_scale: f64,
    ) -> Result<Self> {
        let mut set = Self::empty(sh_degree);
        set.atom_scale = atom_scale;
        for g in gaussians {
            set.push(g)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, mut g: Gaussian) -> Result<()> {
        if g.sh.len() != self.sh_stride() {
            return Err(Error::Shape(format!(
                "gaussian has {} SH values, set expects {}",
                g.sh.len(),
                self.sh_stride()
            )));
        }
        if g.is_atom {
            g.log_scale = Vector3::repeat(self.atom_scale.ln());
        }
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacities_raw.push(g.opacity_raw);
        self.sh.extend_from_slice(&g.sh);
        self.is_atom.push(g.is_atom);
        self.grad_accum.push(0.0);
        self.grad_views.push(0);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn coeffs_per_channel(&self) -> usize {
        sh::num_coeffs(self.sh_degree)
    }

    /// SH values per Gaussian.
    pub fn sh_stride(&self) -> usize {
        3 * self.coeffs_per_channel()
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn atom_scale(&self) -> f64 {
        self.atom_scale
    }

    /// Sets the shared atom scale and re-syncs the stored log scales of atoms.
    pub fn set_atom_scale(&mut self, scale: f64) {
        self.atom_scale = scale;
        let log = scale.ln();
        for (ls, &atom) in self.log_scales.iter_mut().zip(&self.is_atom) {
            if atom {
                *ls = Vector3::repeat(log);
            }
        }
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        if self.is_atom[i] {
            Vector3::repeat(self.atom_scale)
        } else {
            self.log_scales[i].map(f64::exp)
        }
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacities_raw[i])
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_raw: self.opacities_raw[i],
            sh: self.sh_of(i).to_vec(),
            is_atom: self.is_atom[i],
        }
    }

    /// Mean screen-space positional gradient since the last reset.
    pub fn mean_grad(&self, i: usize) -> f64 {
        match self.grad_views[i] {
            0 => 0.0,
            n => self.grad_accum[i] / n as f64,
        }
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_views.iter_mut().for_each(|v| *v = 0);
    }

    /// Reorders the primitives; `order[k]` is the old index placed at slot `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = Self::empty(self.sh_degree);
        out.atom_scale = self.atom_scale;
        for &i in order {
            out.push(self.get(i)).expect("same layout");
            let k = out.len() - 1;
            out.grad_accum[k] = self.grad_accum[i];
            out.grad_views[k] = self.grad_views[i];
        }
        out
    }

    /// Checks the structural invariants of the container.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.rotations.len(),
            self.log_scales.len(),
            self.opacities_raw.len(),
            self.is_atom.len(),
            self.grad_accum.len(),
            self.grad_views.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.sh.len() != n * self.sh_stride() {
            return Err(Error::Validation("parallel arrays differ in length".into()));
        }
        for i in 0..n {
            let s = self.scale(i);
            if !(s.min() > 0.0) || !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("gaussian {i} has scale {s:?}")));
            }
            let a = self.opacity(i);
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Validation(format!("gaussian {i} has opacity {a}")));
            }
            if self.is_atom[i] && !(s.x == s.y && s.y == s.z && s.x == self.atom_scale) {
                return Err(Error::Validation(format!(
                    "atom {i} is not isotropic at the atom scale"
                )));
            }
        }
        Ok(())
    }
}

/// Sparse reconstruction input: points, colors and training camera centers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SfMPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub camera_centers: Vec<Vector3<f64>>,
}

impl SfMPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != colors.len() {
            return Err(Error::Validation(format!(
                "{} points but {} colors",
                points.len(),
                colors.len()
            )));
        }
        Ok(Self {
            points,
            colors,
            camera_centers: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mean distance from every point to its three nearest neighbours.
pub fn nearest3_mean_distances(cloud: &SfMPointCloud) -> Result<Vec<f64>> {
    if cloud.points.len() < 4 {
        return Err(Error::Init(format!(
            "need at least 4 points, got {}",
            cloud.points.len()
        )));
    }
    let tree = KdTree::new(&cloud.points);
    Ok(cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.k_nearest(p, 3, Some(i));
            (nn[0].0 + nn[1].0 + nn[2].0) / 3.0
        })
        .collect())
}

/// Nearest-rank percentile of `distances`.
pub fn atom_scale(distances: &[f64], percentile: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Init("atom scale of an empty distance vector".into()));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Validation(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Largest distance from a camera center to the mean center.
pub fn scene_radius(centers: &[Vector3<f64>]) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::Validation("scene radius needs at least one camera".into()));
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    Ok(centers
        .iter()
        .map(|c| (c - mean).norm())
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitOptions {
    /// Opacity after the sigmoid.
    pub initial_opacity: f64,
    pub sh_degree: usize,
    /// Scale floor for duplicate points, as a fraction of the scene radius.
    pub scale_floor_factor: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            initial_opacity: 0.1,
            sh_degree: 3,
            scale_floor_factor: 1e-7,
        }
    }
}

/// One isotropic Gaussian per point, sized by its neighbour distance.
pub fn init_gaussians(cloud: &SfMPointCloud, distances: &[f64], opts: &InitOptions) -> Result<GaussianSet> {
    if cloud.points.len() < 4 {
        return Err(Error::Init(format!(
            "need at least 4 points, got {}",
            cloud.points.len()
        )));
    }
    if distances.len() != cloud.points.len() {
        return Err(Error::Shape(format!(
            "{} distances for {} points",
            distances.len(),
            cloud.points.len()
        )));
    }
    if !(opts.initial_opacity > 0.0 && opts.initial_opacity < 1.0) {
        return Err(Error::Validation(format!(
            "initial opacity must lie in (0, 1), got {}",
            opts.initial_opacity
        )));
    }
    let radius = if cloud.camera_centers.is_empty() {
        1.0
    } else {
        scene_radius(&cloud.camera_centers)?
    };
    let floor = opts.scale_floor_factor * if radius > 0.0 { radius } else { 1.0 };
    let coeffs = sh::num_coeffs(opts.sh_degree);
    let opacity_raw = logit(opts.initial_opacity);

    let gaussians = cloud.points.iter().zip(&cloud.colors).zip(distances).map(|((p, color), &d)| {
        let mut coeffs_vec = vec![0.0; 3 * coeffs];
        for c in 0..3 {
            coeffs_vec[c] = sh::rgb_to_dc(color[c]);
        }
        Gaussian {
            position: *p,
            rotation: IDENTITY_QUAT,
            log_scale: Vector3::repeat(d.max(floor).ln()),
            opacity_raw,
            sh: coeffs_vec,
            is_atom: false,
        }
    });
    GaussianSet::from_gaussians(gaussians, opts.sh_degree, f64::INFINITY)
}
