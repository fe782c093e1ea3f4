//! Domain-level PLY layouts: Gaussian scenes, oriented clouds and SfM points.

use std::path::Path;

use nalgebra::Vector3;

use super::ply::{read_vertices, write_vertices, Column, PlyVertices, ScalarType};
use crate::error::{Error, Result};
use crate::export::OrientedPointCloud;
use crate::scene::{Gaussian, GaussianSet, SfMPointCloud};
use crate::sh;

const ATOM_SCALE_COMMENT: &str = "atom_scale ";

fn xyz(v: &PlyVertices, path: &Path, names: [&str; 3]) -> Result<Vec<Vector3<f64>>> {
    let [x, y, z] = names.map(|n| v.require(n, path));
    let (x, y, z) = (x?, y?, z?);
    Ok((0..v.count).map(|i| Vector3::new(x[i], y[i], z[i])).collect())
}

/// Columns `{prefix}0 .. {prefix}{count - 1}`.
fn columns<'a>(v: &'a PlyVertices, path: &Path, prefix: &str, count: usize) -> Result<Vec<&'a [f64]>> {
    (0..count).map(|k| v.require(&format!("{prefix}{k}"), path)).collect()
}

fn colors(v: &PlyVertices) -> Option<Vec<[f64; 3]>> {
    let r = v.column("red")?;
    let g = v.column("green")?;
    let b = v.column("blue")?;
    let scale = match v.column_type("red")? {
        ScalarType::F32 | ScalarType::F64 => 1.0,
        ScalarType::U16 => 1.0 / 65535.0,
        _ => 1.0 / 255.0,
    };
    Some((0..v.count).map(|i| [r[i] * scale, g[i] * scale, b[i] * scale]).collect())
}

/// Reads SfM points with optional `red/green/blue` colors (grey when absent).
pub fn read_sfm_points(path: impl AsRef<Path>) -> Result<SfMPointCloud> {
    let path = path.as_ref();
    let v = read_vertices(path)?;
    let points = xyz(&v, path, ["x", "y", "z"])?;
    let colors = colors(&v).unwrap_or_else(|| vec![[0.5; 3]; v.count]);
    SfMPointCloud::new(points, colors)
}

fn split3(points: &[Vector3<f64>]) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|k| points.iter().map(|p| p[k]).collect())
}

/// Writes `x y z red green blue` with 8-bit colors.
pub fn write_sfm_points(path: impl AsRef<Path>, cloud: &SfMPointCloud) -> Result<()> {
    let [x, y, z] = split3(&cloud.points);
    let [r, g, b] = [0, 1, 2].map(|c| cloud.colors.iter().map(|v| v[c] * 255.0).collect::<Vec<_>>());
    write_vertices(
        path,
        &[],
        &[
            Column::new("x", ScalarType::F32, &x),
            Column::new("y", ScalarType::F32, &y),
            Column::new("z", ScalarType::F32, &z),
            Column::new("red", ScalarType::U8, &r),
            Column::new("green", ScalarType::U8, &g),
            Column::new("blue", ScalarType::U8, &b),
        ],
    )
}

/// Writes `x y z nx ny nz red green blue`, colors as 8-bit.
pub fn write_oriented_cloud(path: impl AsRef<Path>, cloud: &OrientedPointCloud) -> Result<()> {
    cloud.validate()?;
    let [x, y, z] = split3(&cloud.positions);
    let [nx, ny, nz] = split3(&cloud.normals);
    let [r, g, b] = [0, 1, 2].map(|c| cloud.colors.iter().map(|v| v[c] * 255.0).collect::<Vec<_>>());
    write_vertices(
        path,
        &[],
        &[
            Column::new("x", ScalarType::F32, &x),
            Column::new("y", ScalarType::F32, &y),
            Column::new("z", ScalarType::F32, &z),
            Column::new("nx", ScalarType::F32, &nx),
            Column::new("ny", ScalarType::F32, &ny),
            Column::new("nz", ScalarType::F32, &nz),
            Column::new("red", ScalarType::U8, &r),
            Column::new("green", ScalarType::U8, &g),
            Column::new("blue", ScalarType::U8, &b),
        ],
    )
}

pub fn read_oriented_cloud(path: impl AsRef<Path>) -> Result<OrientedPointCloud> {
    let path = path.as_ref();
    let v = read_vertices(path)?;
    let positions = xyz(&v, path, ["x", "y", "z"])?;
    let normals = match (v.column("nx"), v.column("ny"), v.column("nz")) {
        (Some(_), Some(_), Some(_)) => xyz(&v, path, ["nx", "ny", "nz"])?,
        _ => vec![Vector3::z(); v.count],
    };
    let colors = colors(&v).unwrap_or_else(|| vec![[0.5; 3]; v.count]);
    Ok(OrientedPointCloud {
        positions,
        normals,
        colors,
    })
}

/// Point positions of any vertex PLY.
pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<Vector3<f64>>> {
    let path = path.as_ref();
    xyz(&read_vertices(path)?, path, ["x", "y", "z"])
}

/// Writes the common splat layout: positions, zero normals, `f_dc_*`,
/// channel-major `f_rest_*`, `opacity` (logit), `scale_*` (log), `rot_*`
/// (w first) and an `atom` flag. The atom scale is stored as a comment.
pub fn write_gaussians(path: impl AsRef<Path>, scene: &GaussianSet) -> Result<()> {
    let n = scene.len();
    let k = scene.coeffs_per_channel();
    let [x, y, z] = split3(&scene.positions);
    let zeros = vec![0.0; n];
    let mut names: Vec<String> = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    for c in 0..3 {
        names.push(format!("f_dc_{c}"));
        data.push((0..n).map(|i| scene.sh_of(i)[c]).collect());
    }
    for c in 0..3 {
        for j in 1..k {
            names.push(format!("f_rest_{}", c * (k - 1) + j - 1));
            data.push((0..n).map(|i| scene.sh_of(i)[j * 3 + c]).collect());
        }
    }
    names.push("opacity".into());
    data.push(scene.opacities_raw.clone());
    for a in 0..3 {
        names.push(format!("scale_{a}"));
        data.push((0..n).map(|i| scene.scale(i)[a].ln()).collect());
    }
    for a in 0..4 {
        names.push(format!("rot_{a}"));
        data.push(scene.rotations.iter().map(|q| q[a]).collect());
    }
    let atoms: Vec<f64> = scene.is_atom.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();

    let mut columns = vec![
        Column::new("x", ScalarType::F32, &x),
        Column::new("y", ScalarType::F32, &y),
        Column::new("z", ScalarType::F32, &z),
        Column::new("nx", ScalarType::F32, &zeros),
        Column::new("ny", ScalarType::F32, &zeros),
        Column::new("nz", ScalarType::F32, &zeros),
    ];
    for (name, values) in names.iter().zip(&data) {
        columns.push(Column::new(name.clone(), ScalarType::F32, values));
    }
    columns.push(Column::new("atom", ScalarType::U8, &atoms));
    let comments = [format!("{ATOM_SCALE_COMMENT}{:e}", scene.atom_scale())];
    write_vertices(path, &comments, &columns)
}

pub fn read_gaussians(path: impl AsRef<Path>) -> Result<GaussianSet> {
    let path = path.as_ref();
    let v = read_vertices(path)?;
    let rest = v.names().filter(|n| n.starts_with("f_rest_")).count();
    let k = rest / 3 + 1;
    let degree = (0..=sh::MAX_DEGREE)
        .find(|&d| sh::num_coeffs(d) == k && rest % 3 == 0)
        .ok_or_else(|| Error::parse(path, 0, format!("{rest} f_rest properties match no SH degree")))?;
    let atom_scale = v
        .comments
        .iter()
        .find_map(|c| c.strip_prefix(ATOM_SCALE_COMMENT))
        .map(|s| s.trim().parse::<f64>())
        .transpose()
        .map_err(|e| Error::parse(path, 0, format!("bad atom scale comment: {e}")))?;

    let positions = xyz(&v, path, ["x", "y", "z"])?;
    let dc = columns(&v, path, "f_dc_", 3)?;
    let rest_cols = columns(&v, path, "f_rest_", rest)?;
    let opacity = v.require("opacity", path)?;
    let scales = xyz(&v, path, ["scale_0", "scale_1", "scale_2"])?;
    let rot = columns(&v, path, "rot_", 4)?;
    let atom = v.column("atom");

    let mut gaussians = Vec::with_capacity(v.count);
    let mut inferred_atom_scale = None;
    for i in 0..v.count {
        let mut coeffs = vec![0.0; 3 * k];
        for c in 0..3 {
            coeffs[c] = dc[c][i];
            for j in 1..k {
                coeffs[j * 3 + c] = rest_cols[c * (k - 1) + j - 1][i];
            }
        }
        let is_atom = atom.is_some_and(|a| a[i] != 0.0);
        if is_atom && inferred_atom_scale.is_none() {
            inferred_atom_scale = Some(scales[i].x.exp());
        }
        gaussians.push(Gaussian {
            position: positions[i],
            rotation: [rot[0][i], rot[1][i], rot[2][i], rot[3][i]],
            log_scale: scales[i],
            opacity_raw: opacity[i],
            sh: coeffs,
            is_atom,
        });
    }
    let atom_scale = atom_scale.or(inferred_atom_scale).unwrap_or(f64::INFINITY);
    GaussianSet::from_gaussians(gaussians, degree, atom_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cloud_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_oriented_cloud(&path, &OrientedPointCloud::default()).unwrap();
        let back = read_oriented_cloud(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let cloud = OrientedPointCloud {
            positions: vec![Vector3::new(0.5, 1.25, -2.0), Vector3::new(3.0, 0.0, 1.0), Vector3::zeros()],
            normals: vec![Vector3::z(), Vector3::x(), Vector3::new(0.6, 0.8, 0.0)],
            colors: vec![[1.0, 0.0, 0.2], [0.5, 0.5, 0.5], [0.0, 1.0, 0.0]],
        };
        write_oriented_cloud(&path, &cloud).unwrap();
        let back = read_oriented_cloud(&path).unwrap();
        for i in 0..3 {
            assert_eq!(back.positions[i], cloud.positions[i].map(|v| v as f32 as f64));
            assert_eq!(back.normals[i], cloud.normals[i].map(|v| v as f32 as f64));
            for c in 0..3 {
                assert!((back.colors[i][c] - cloud.colors[i][c]).abs() <= 0.5 / 255.0);
            }
        }
    }
}
