//! Experiment runner for performative reinforcement learning in linear
//! MDPs: config files, drivers and output formats on top of
//! `perf-lmdp-core`.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod game_io;
pub mod instance;
pub mod output;

pub use commands::{run, OutputNames, RunReport};
pub use config::{parse_config, parse_config_str, Driver, ExperimentConfig};
pub use error::CliError;
