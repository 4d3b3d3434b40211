//! Command-line front end: configuration, per-class training, evaluation,
//! benchmark sweeps and metric reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;

pub use config::{ModelType, RunConfig};
pub use error::CliError;
pub use metrics::MetricsReport;
