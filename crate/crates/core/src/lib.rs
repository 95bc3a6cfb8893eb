//! Tree-structured learned image codec.

pub mod cli;
pub mod coder;
pub mod config;
pub mod desk;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod interp;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
