//! File formats, reports, experiment recipes and the command-line harness
//! around `seqens-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod pnm;
pub mod recipes;
pub mod report;

pub use error::{LabError, Result};
