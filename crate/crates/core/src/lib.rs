pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod interpret;
pub mod manifest;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod patch;
pub mod pathway;
pub mod rng;
pub mod survival;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
