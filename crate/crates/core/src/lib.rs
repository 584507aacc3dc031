pub mod cli;
pub mod data;
pub mod downstream_handwriting;
pub mod downstream_sketch;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pretrain;
pub mod raster;
pub mod stroke;

pub use error::{Error, Result};
