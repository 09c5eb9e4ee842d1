//! Experiment harness: configuration, checkpoints, metrics files, plot
//! data, experiment drivers and the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod plots;
pub mod run;
pub mod selfcheck;
