//! Experiment orchestration for the `wexp` command-line tool: configuration,
//! the on-disk distance cache, model files and the repeated
//! validate/train/test pipeline.

pub mod cache;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod model;
pub mod pipeline;
