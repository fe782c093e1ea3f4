use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use splatkit::camera::AxisConvention;
use splatkit::export::{fuse_views, FuseOptions};
use splatkit::geometry::{curvature_map, normal_map, unproject_depth};
use splatkit::image::Image;
use splatkit::io::{
    read_gaussians, read_points, write_float_map, write_oriented_cloud, write_png, write_sfm_points, CameraRig,
};
use splatkit::metrics::chamfer_distance;
use splatkit::raster::{render, RenderSettings};
use splatkit::synthetic::{RecoveryConfig, RecoveryFixture};
use splatkit::train::{train_from_files, DataConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "splatkit", version, about = "CPU Gaussian splatting with atomized density control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    Atomization,
    Normal,
    MsSsim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MapKind {
    Rgb,
    Depth,
    Normal,
    Curvature,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a scene from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Disable a component; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Override the spherical-harmonics degree (0 is fastest).
        #[arg(long)]
        sh_degree: Option<usize>,
        /// Override the iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fuse an oriented colored point cloud from the views of a camera rig.
    ExportPoints {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        min_accumulation: f64,
        /// Voxel decimation cell size in world units.
        #[arg(long)]
        voxel_size: Option<f64>,
    },
    /// Print the chamfer distance between two point PLY files.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Render maps of one camera to PNG and float-map files.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "rgb,depth,normal,curvature")]
        maps: Vec<MapKind>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Write the textured-sphere scene as a trainable example dataset.
    MakeFixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 3000)]
        iterations: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            ablate,
            sh_degree,
            iterations,
            output,
        } => {
            let mut cfg = TrainConfig::read(&config)?;
            for a in ablate {
                match a {
                    Ablation::Atomization => cfg.ablation.disable_atomization = true,
                    Ablation::Normal => cfg.ablation.disable_normal_loss = true,
                    Ablation::MsSsim => cfg.ablation.disable_ms_ssim = true,
                }
            }
            if let Some(d) = sh_degree {
                cfg.init.sh_degree = d;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(o) = output {
                cfg.data.output = o;
            }
            if cfg.data.output.as_os_str().is_empty() {
                bail!("no output directory: set data.output in the config or pass --output");
            }
            let out = train_from_files(&cfg)?;
            if let Some(last) = out.metrics.last() {
                println!(
                    "iteration {} loss {:.6} psnr {:.2} dB gaussians {} atoms {}",
                    last.iteration, last.loss, last.psnr, last.count, last.atoms
                );
            }
            println!("wrote {}", cfg.data.output.join("final.ply").display());
        }
        Command::ExportPoints {
            checkpoint,
            cameras,
            out,
            min_accumulation,
            voxel_size,
        } => {
            let scene = read_gaussians(&checkpoint)?;
            let cams = CameraRig::read(&cameras)?.cameras()?;
            let opts = FuseOptions {
                min_accumulation,
                voxel_size,
                ..FuseOptions::default()
            };
            let cloud = fuse_views(&scene, &cams, &opts)?;
            write_oriented_cloud(&out, &cloud)?;
            println!("wrote {} points to {}", cloud.len(), out.display());
        }
        Command::Eval { pred, gt } => {
            let a = read_points(&pred)?;
            let b = read_points(&gt)?;
            println!("{}", chamfer_distance(&a, &b)?);
        }
        Command::Render {
            checkpoint,
            cameras,
            camera,
            maps,
            out_dir,
        } => {
            let scene = read_gaussians(&checkpoint)?;
            let cams = CameraRig::read(&cameras)?.cameras()?;
            let cam = cams
                .get(camera)
                .with_context(|| format!("camera {camera} out of range (rig has {})", cams.len()))?;
            fs::create_dir_all(&out_dir)?;
            let out = render(&scene, cam, &RenderSettings::default())?.without_cache();
            let mask: Vec<bool> = out.accumulation.data().iter().map(|&a| a >= 0.5).collect();
            let positions = unproject_depth(&out.median_depth, cam, Some(&mask))?;
            let normals = normal_map(&positions);
            for kind in maps {
                match kind {
                    MapKind::Rgb => write_png(out_dir.join("rgb.png"), &out.rgb)?,
                    MapKind::Depth => {
                        write_float_map(out_dir.join("depth.fmap"), &out.median_depth)?;
                        write_float_map(out_dir.join("accumulation.fmap"), &out.accumulation)?;
                    }
                    MapKind::Normal => {
                        write_float_map(out_dir.join("normal.fmap"), &normals.normals)?;
                        write_png(out_dir.join("normal.png"), &visualize_normals(&normals.normals, &normals.valid))?;
                    }
                    MapKind::Curvature => {
                        let curvature = curvature_map(&normals);
                        write_float_map(out_dir.join("curvature.fmap"), &curvature.curvature)?;
                        write_png(out_dir.join("curvature.png"), &curvature.curvature)?;
                    }
                }
            }
            println!("wrote maps to {}", out_dir.display());
        }
        Command::MakeFixture {
            out_dir,
            resolution,
            iterations,
        } => make_fixture(&out_dir, resolution, iterations)?,
    }
    Ok(())
}

fn visualize_normals(normals: &Image, valid: &[bool]) -> Image {
    Image::from_fn(normals.width(), normals.height(), 3, |x, y, c| {
        if valid[y * normals.width() + x] {
            0.5 * normals.get(x, y, c) + 0.5
        } else {
            0.0
        }
    })
}

fn make_fixture(dir: &Path, resolution: usize, iterations: usize) -> Result<()> {
    let mut cfg = RecoveryConfig {
        resolution,
        ..RecoveryConfig::default()
    };
    let base = cfg.train.iterations;
    cfg.train.iterations = iterations;
    let d = &mut cfg.train.density;
    for step in [
        &mut d.atomize_until,
        &mut d.warmup_until,
        &mut d.densify_from,
        &mut d.densify_until,
        &mut d.densify_interval,
        &mut d.opacity_reset_interval,
    ] {
        *step = (*step * iterations / base).max(1);
    }
    let fixture = RecoveryFixture::new(&cfg)?;
    let images = dir.join("images");
    fs::create_dir_all(&images)?;

    let write_rig = |name: &str, views: &[splatkit::train::TrainingView]| -> Result<()> {
        let mut files = Vec::new();
        for (k, v) in views.iter().enumerate() {
            let file = format!("images/{name}_{k:03}.png");
            write_png(dir.join(&file), &v.image)?;
            files.push(Some(file));
        }
        let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
        CameraRig::from_cameras(&cams, AxisConvention::OpenGl, &files)?.write(dir.join(format!("{name}.json")))?;
        Ok(())
    };
    write_rig("train", &fixture.train)?;
    write_rig("test", &fixture.held_out)?;
    write_sfm_points(dir.join("points.ply"), &fixture.sfm_cloud(&cfg)?)?;
    splatkit::io::write_gaussians(dir.join("ground_truth.ply"), &fixture.ground_truth)?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.data = DataConfig {
        cameras: "train.json".into(),
        points: "points.ply".into(),
        output: "output".into(),
    };
    fs::write(dir.join("config.toml"), train_cfg.to_toml()?)?;
    println!("wrote fixture to {}", dir.display());
    Ok(())
}
