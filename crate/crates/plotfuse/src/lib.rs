//! File formats, weight archives, PNG export, configuration and the
//! command-line runner around `plotfuse-core`.

pub mod archive;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod image;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
