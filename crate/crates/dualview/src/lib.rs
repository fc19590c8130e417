//! File formats, run configuration and workflow commands around
//! [`dualview_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod nifti_io;

pub use error::{CliError, Result};
