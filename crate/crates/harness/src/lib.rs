//! Experiment grids over the learning paradigms: configuration, execution
//! and reporting.

pub mod config;
pub mod error;
pub mod grid;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
