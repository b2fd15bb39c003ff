//! Seeds, synthetic data, persistence, configuration and reporting.

pub mod config;
pub mod io;
pub mod report;
pub mod rng;
pub mod runner;
pub mod synth;
