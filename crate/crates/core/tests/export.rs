//! Fused point clouds and the depth-to-normal pipeline against analytic surfaces.

use nalgebra::Vector3;

use splatkit::camera::{Camera, Intrinsics};
use splatkit::export::{fuse_view, fuse_views, FuseOptions};
use splatkit::geometry::{normal_map, unproject_depth, unproject_pixel};
use splatkit::image::Image;
use splatkit::scene::{logit, Gaussian, GaussianSet, IDENTITY_QUAT};
use splatkit::synthetic::{front_camera, sphere_cameras, textured_sphere, SphereOptions};

/// Opaque fronto-parallel sheet of flat Gaussians at depth `z`.
fn quad(z: f64) -> GaussianSet {
    let mut gaussians = Vec::new();
    for i in 0..12 {
        for j in 0..12 {
            gaussians.push(Gaussian {
                position: Vector3::new(-0.55 + 0.1 * i as f64, -0.55 + 0.1 * j as f64, z),
                rotation: IDENTITY_QUAT,
                log_scale: Vector3::new(0.08, 0.08, 0.002).map(f64::ln),
                opacity_raw: logit(0.99),
                sh: vec![0.5, 0.0, -0.5],
                is_atom: false,
            });
        }
    }
    GaussianSet::from_gaussians(gaussians, 0, f64::INFINITY).unwrap()
}

#[test]
fn a_planar_quad_fuses_to_a_plane_facing_the_camera() {
    let cam = front_camera(32, 32).unwrap();
    let cloud = fuse_view(&quad(1.5), &cam, &FuseOptions::default()).unwrap();
    assert!(cloud.len() > 200, "only {} points", cloud.len());
    cloud.validate().unwrap();
    for (p, n) in cloud.positions.iter().zip(&cloud.normals) {
        assert!((p.z - 1.5).abs() < 0.01, "point {p:?} off the plane");
        assert!(n.dot(&-Vector3::z()) > 0.999, "normal {n:?}");
        assert!(n.dot(&(cam.center() - p)) > 0.0);
    }
}

#[test]
fn fusing_concatenates_views() {
    let scene = quad(0.0);
    let intr = Intrinsics::from_fov_x(0.8, 32, 32);
    let cams = [
        Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), -Vector3::y(), intr).unwrap(),
        Camera::look_at(Vector3::new(2.1, 0.0, -2.1), Vector3::zeros(), -Vector3::y(), intr).unwrap(),
    ];
    let opts = FuseOptions::default();
    let per_view: usize = cams.iter().map(|c| fuse_view(&scene, c, &opts).unwrap().len()).sum();
    let fused = fuse_views(&scene, &cams, &opts).unwrap();
    assert_eq!(fused.len(), per_view);

    let decimated = fuse_views(&scene, &cams, &FuseOptions { voxel_size: Some(0.1), ..opts }).unwrap();
    assert!(decimated.len() < fused.len());
    decimated.validate().unwrap();
}

#[test]
fn nothing_in_view_is_an_error() {
    let cam = front_camera(16, 16).unwrap();
    assert!(fuse_views(&quad(-4.0), &[cam], &FuseOptions::default()).is_err());
}

#[test]
fn a_dense_sphere_fuses_close_to_its_surface() {
    let scene = textured_sphere(&SphereOptions {
        count: 4000,
        tangent_scale: 0.04,
        normal_scale: 0.002,
        ..SphereOptions::default()
    })
    .unwrap();
    let cams = sphere_cameras(6, 3.5, Vector3::zeros(), Intrinsics::from_fov_x(45f64.to_radians(), 128, 128)).unwrap();
    let cloud = fuse_views(&scene, &cams, &FuseOptions::default()).unwrap();
    let rms = (cloud.positions.iter().map(|p| (p.norm() - 1.0).powi(2)).sum::<f64>() / cloud.len() as f64).sqrt();
    assert!(rms < 0.02, "rms radial error {rms}");
}

/// Ray-traced camera depth of the unit sphere at the origin; zero on misses.
fn sphere_depth(cam: &Camera) -> Image {
    let center = cam.center();
    Image::from_fn(cam.width(), cam.height(), 1, |x, y, _| {
        let dir = (unproject_pixel(cam, x, y, 1.0) - center).normalize();
        let b = dir.dot(&center);
        let disc = b * b - (center.norm_squared() - 1.0);
        if disc < 0.0 {
            return 0.0;
        }
        let hit = center + dir * (-b - disc.sqrt());
        cam.to_camera(&hit).z
    })
}

#[test]
fn sphere_normals_match_the_analytic_surface() {
    let intr = Intrinsics::from_fov_x(40f64.to_radians(), 128, 128);
    for cam in sphere_cameras(3, 3.0, Vector3::zeros(), intr).unwrap() {
        let depth = sphere_depth(&cam);
        let positions = unproject_depth(&depth, &cam, None).unwrap();
        let normals = normal_map(&positions);
        let mut checked = 0;
        for y in 0..128 {
            for x in 0..128 {
                if !normals.valid[y * 128 + x] {
                    continue;
                }
                let p = positions.positions.pixel(x, y);
                let p = Vector3::new(p[0], p[1], p[2]);
                let analytic = p.normalize();
                let to_camera = (cam.center() - p).normalize();
                // silhouettes: grazing rays where the stencil straddles the rim
                if analytic.dot(&to_camera) < 0.3 {
                    continue;
                }
                let n = normals.normals.pixel(x, y);
                let angle = Vector3::new(n[0], n[1], n[2]).dot(&analytic).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(angle <= 3.0, "pixel ({x}, {y}) is off by {angle} degrees");
                checked += 1;
            }
        }
        assert!(checked > 5000, "only {checked} pixels checked");
    }
}
