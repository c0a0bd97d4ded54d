//! IO companion to `oatrack-core`: weight files, OTB-style sequence
//! directories, run configuration, result and metric files, and the
//! command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod otb;
pub mod report;
pub mod weights;

pub use oatrack_core as core;
pub use error::{Error, Result};
