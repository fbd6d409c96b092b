//! Workbench harness: image ingestion, suite configuration and
//! orchestration, report and figure-data writers.

pub mod config;
mod error;
pub mod image_io;
pub mod plotdata;
pub mod report;
pub mod suite;
pub mod synth;

pub use error::{HarnessError, Result};
