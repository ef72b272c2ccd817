//! Experiment harness: configuration, datasets and the staged runner behind
//! the `exitsteal` command.

pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod idx;
