//! Harness around `chainshift-core`: dataset ingestion, PNG and archive
//! formats, the scorer wire protocol, campaigns, reports and the CLI.

pub mod adapter_file;
pub mod archive;
pub mod campaign;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod png_io;
pub mod protocol;
pub mod report;

pub use error::{HarnessError, Result};
