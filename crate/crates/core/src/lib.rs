pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evidential;
pub mod experiments;
pub mod fusion;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod regularizers;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
