//! Experiment driver: configuration, training/evaluation commands, sweeps
//! and analyses. The `cavia` binary is a thin argument-parsing shell over
//! these modules, which integration tests call directly.

pub mod config;
pub mod embed;
pub mod eval;
pub mod gradnorm;
pub mod output;
pub mod suites;
pub mod sweep;
pub mod train;
