pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod dit;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod moe;
pub mod numeric;
pub mod raster;

pub use error::{Error, Result};
