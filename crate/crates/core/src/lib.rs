pub mod backbones;
pub mod cli;
pub mod config;
pub mod datafilter;
pub mod error;
pub mod inference;
pub mod mapper;
pub mod metrics;
mod nn;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
