//! Correspondence state-space hand pose estimation on a small float64
//! autodiff engine.

pub mod app;
pub mod check;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod mamba;
pub mod model;
pub mod nn;
pub mod points;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
