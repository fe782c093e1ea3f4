pub mod camera;
pub mod density;
pub mod error;
pub mod export;
pub mod geometry;
pub mod image;
pub mod io;
pub mod knn;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod projection;
pub mod raster;
pub mod registry;
pub mod scene;
pub mod sh;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
