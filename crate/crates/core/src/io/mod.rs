//! File formats: PLY, camera JSON, float maps and PNG.

pub mod cameras;
pub mod floatmap;
pub mod ply;
pub mod png;
pub mod splat;

pub use cameras::{CameraRig, FrameRecord, View};
pub use floatmap::{read_float_map, write_float_map};
pub use png::{read_png_rgb, write_png};
pub use splat::{
    read_gaussians, read_oriented_cloud, read_points, read_sfm_points, write_gaussians, write_oriented_cloud,
    write_sfm_points,
};
