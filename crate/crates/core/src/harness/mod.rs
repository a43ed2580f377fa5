//! Experiment support: synthetic cases, metrics, file formats, configuration
//! files and the figure reproductions.

pub mod config;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod synth;
