//! Config-driven driver for `demand-dml-core`: file formats, report tables
//! and the end-to-end estimation workflow.

pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::CliError;
