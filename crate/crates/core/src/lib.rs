pub mod bbox;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod track;
pub mod train;
pub mod transfer;

pub use bbox::BBox;
pub use error::{Error, Result};
