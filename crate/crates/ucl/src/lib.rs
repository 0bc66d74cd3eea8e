//! Datasets, persistence and the experiment runner around `ucl-core`.

pub mod analyze;
pub mod checkpoint;
pub mod config_file;
pub mod datasets;
pub mod error;
pub mod manifest;
pub mod plots;
pub mod record;
pub mod runner;

pub use error::{Result, UclError};
