//! Experiment runner for the tracking pipeline: scenarios, sweeps and reports.

pub mod commands;
pub mod error;
pub mod experiments;
pub mod scenario;

pub use error::{Error, Result};
pub use scenario::Scenario;
