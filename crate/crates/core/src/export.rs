//! Oriented colored point clouds fused from rendered median depth.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{normal_map, unproject_depth};
use crate::raster::{render, RenderSettings};
use crate::scene::GaussianSet;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.normals.len() != self.len() || self.colors.len() != self.len() {
            return Err(Error::Validation("point cloud arrays differ in length".into()));
        }
        if let Some(i) = self.normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::Validation(format!("normal {i} is not unit length")));
        }
        Ok(())
    }

    fn extend(&mut self, other: OrientedPointCloud) {
        self.positions.extend(other.positions);
        self.normals.extend(other.normals);
        self.colors.extend(other.colors);
    }

    /// Averages the points falling into each cubic cell of side `cell`. Cells
    /// are emitted in order of their first point.
    pub fn decimate(&self, cell: f64) -> Result<OrientedPointCloud> {
        if !(cell > 0.0) {
            return Err(Error::Validation(format!("voxel size must be > 0, got {cell}")));
        }
        let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
        let mut sums: Vec<(Vector3<f64>, Vector3<f64>, [f64; 3], usize)> = Vec::new();
        for i in 0..self.len() {
            let key = self.positions[i].map(|v| (v / cell).floor() as i64);
            let slot = *slots.entry([key.x, key.y, key.z]).or_insert_with(|| {
                sums.push((Vector3::zeros(), Vector3::zeros(), [0.0; 3], 0));
                sums.len() - 1
            });
            let s = &mut sums[slot];
            s.0 += self.positions[i];
            s.1 += self.normals[i];
            for c in 0..3 {
                s.2[c] += self.colors[i][c];
            }
            s.3 += 1;
        }
        let mut out = OrientedPointCloud::default();
        for (p, n, c, k) in sums {
            let len = n.norm();
            if len == 0.0 {
                continue;
            }
            let k = k as f64;
            out.positions.push(p / k);
            out.normals.push(n / len);
            out.colors.push(c.map(|v| v / k));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseOptions {
    pub min_accumulation: f64,
    /// Voxel decimation cell size; off when `None`.
    pub voxel_size: Option<f64>,
    pub render: RenderSettings,
}

impl Default for FuseOptions {
    fn default() -> Self {
        Self {
            min_accumulation: 0.5,
            voxel_size: None,
            render: RenderSettings::default(),
        }
    }
}

/// Points of one view: median depth unprojected where coverage is sufficient.
pub fn fuse_view(scene: &GaussianSet, cam: &Camera, opts: &FuseOptions) -> Result<OrientedPointCloud> {
    let out = render(scene, cam, &opts.render)?.without_cache();
    let mask: Vec<bool> = out
        .accumulation
        .data()
        .iter()
        .map(|&a| a >= opts.min_accumulation)
        .collect();
    let positions = unproject_depth(&out.median_depth, cam, Some(&mask))?;
    let normals = normal_map(&positions);
    let mut cloud = OrientedPointCloud::default();
    for y in 0..cam.height() {
        for x in 0..cam.width() {
            if !normals.valid[y * cam.width() + x] {
                continue;
            }
            let p = positions.positions.pixel(x, y);
            let n = normals.normals.pixel(x, y);
            let c = out.rgb.pixel(x, y);
            cloud.positions.push(Vector3::new(p[0], p[1], p[2]));
            cloud.normals.push(Vector3::new(n[0], n[1], n[2]));
            cloud.colors.push([c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]);
        }
    }
    Ok(cloud)
}

/// Concatenates the per-view clouds in camera order.
pub fn fuse_views(scene: &GaussianSet, cameras: &[Camera], opts: &FuseOptions) -> Result<OrientedPointCloud> {
    let views: Vec<OrientedPointCloud> = cameras
        .par_iter()
        .map(|cam| fuse_view(scene, cam, opts))
        .collect::<Result<_>>()?;
    let mut cloud = OrientedPointCloud::default();
    for v in views {
        cloud.extend(v);
    }
    if cloud.is_empty() {
        return Err(Error::Validation("no valid pixels in any view".into()));
    }
    match opts.voxel_size {
        Some(cell) => cloud.decimate(cell),
        None => Ok(cloud),
    }
}
