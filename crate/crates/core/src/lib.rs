//! SDF-augmented Gaussian splatting over an octree level-of-detail grid.

pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod grid;
pub mod growth;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod seed;
pub mod spatial;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
