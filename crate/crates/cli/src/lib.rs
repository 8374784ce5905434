//! Command-line pipeline: corpus synthesis, grid inspection, pre-training,
//! detector training and evaluation.

pub mod commands;
pub mod config;

pub use config::{parse_config, RunConfig};
