pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod mixup;
pub mod model;
pub mod nn;
pub mod seed;
pub mod synthdata;
pub mod trainer;
pub mod verify;
pub mod voxel;

pub use error::{Error, Result};
