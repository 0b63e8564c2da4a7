pub mod ablate;
pub mod annotations;
pub mod backbone;
pub mod cascade;
pub mod checks;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod params;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
